//! Strict span-level precision, recall and F1, and aggregation over seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;

/// Spans per sentence id.
pub type SpanSets = BTreeMap<String, BTreeSet<EntitySpan>>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction for unknown sentence {0:?}")]
    UnknownSentence(String),
    #[error("cannot aggregate zero reports")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
}

impl Counts {
    /// Precision, recall and F1, each 0 when undefined.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.matched, self.predicted);
        let r = ratio(self.matched, self.gold);
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        (p, r, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for Prf {
    fn from(counts: Counts) -> Self {
        let (precision, recall, f1) = counts.prf();
        Self {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro-averaged over all spans.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_label: BTreeMap<String, Prf>,
    /// Unweighted mean of the per-label F1 scores.
    pub macro_f1: f64,
}

/// Scores predicted spans against gold spans. A prediction counts only if
/// its start, end and label all equal a gold span of the same sentence.
/// Gold sentences absent from `pred` count as predicting nothing.
pub fn score(gold: &SpanSets, pred: &SpanSets) -> Result<EvalReport, EvalError> {
    if let Some(id) = pred.keys().find(|id| !gold.contains_key(*id)) {
        return Err(EvalError::UnknownSentence(id.clone()));
    }
    let empty = BTreeSet::new();
    let mut total = Counts::default();
    let mut by_label: BTreeMap<String, Counts> = BTreeMap::new();
    for (id, g) in gold {
        let p = pred.get(id).unwrap_or(&empty);
        for s in g {
            by_label.entry(s.label.clone()).or_default().gold += 1;
        }
        for s in p {
            let c = by_label.entry(s.label.clone()).or_default();
            c.predicted += 1;
            if g.contains(s) {
                c.matched += 1;
            }
        }
        total.gold += g.len();
        total.predicted += p.len();
        total.matched += p.intersection(g).count();
    }
    let (precision, recall, f1) = total.prf();
    let per_label: BTreeMap<String, Prf> =
        by_label.into_iter().map(|(l, c)| (l, c.into())).collect();
    let macro_f1 = if per_label.is_empty() {
        0.0
    } else {
        per_label.values().map(|p| p.f1).sum::<f64>() / per_label.len() as f64
    };
    Ok(EvalReport {
        precision,
        recall,
        f1,
        counts: total,
        per_label,
        macro_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub reports: Vec<EvalReport>,
    pub n: usize,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    /// Sample standard deviation (n - 1 denominator), 0 for a single run.
    pub sd_f1: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate(reports: Vec<EvalReport>) -> Result<RunSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = reports.len();
    let f1s: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    let mean_f1 = mean(&f1s);
    let sd_f1 = if n == 1 {
        0.0
    } else {
        // shifted by the first value so a constant sequence gives exactly 0
        let d: Vec<f64> = f1s.iter().map(|f| f - f1s[0]).collect();
        let (s, s2) = (d.iter().sum::<f64>(), d.iter().map(|x| x * x).sum::<f64>());
        ((s2 - s * s / n as f64) / (n - 1) as f64).max(0.0).sqrt()
    };
    let mean_precision = mean(&reports.iter().map(|r| r.precision).collect::<Vec<_>>());
    let mean_recall = mean(&reports.iter().map(|r| r.recall).collect::<Vec<_>>());
    Ok(RunSummary {
        reports,
        n,
        mean_precision,
        mean_recall,
        mean_f1,
        sd_f1,
    })
}

/// Plain-text table, one row per named report, scores as percentages.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.clone(),
                format!("{:.2}", 100.0 * r.precision),
                format!("{:.2}", 100.0 * r.recall),
                format!("{:.2}", 100.0 * r.f1),
            ]
        })
        .collect();
    table(&["run", "P", "R", "F1"], &cells)
}

/// Per-seed rows followed by a mean ± sd row.
pub fn render_summary(names: &[String], summary: &RunSummary) -> String {
    let mut rows: Vec<[String; 4]> = names
        .iter()
        .zip(&summary.reports)
        .map(|(n, r)| {
            [
                n.clone(),
                format!("{:.2}", 100.0 * r.precision),
                format!("{:.2}", 100.0 * r.recall),
                format!("{:.2}", 100.0 * r.f1),
            ]
        })
        .collect();
    rows.push([
        format!("mean (n={})", summary.n),
        format!("{:.2}", 100.0 * summary.mean_precision),
        format!("{:.2}", 100.0 * summary.mean_recall),
        format!(
            "{:.2} ± {:.2}",
            100.0 * summary.mean_f1,
            100.0 * summary.sd_f1
        ),
    ]);
    table(&["run", "P", "R", "F1"], &rows)
}

pub fn table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let mut parts = Vec::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            parts.push(if i == 0 {
                format!("{c}{}", " ".repeat(pad))
            } else {
                format!("{}{c}", " ".repeat(pad))
            });
        }
        writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
    };
    line(header.to_vec());
    line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    );
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sets(items: &[(&str, &[(usize, usize, &str)])]) -> SpanSets {
        items
            .iter()
            .map(|(id, spans)| {
                (
                    id.to_string(),
                    spans
                        .iter()
                        .map(|&(s, e, l)| EntitySpan::new(s, e, l))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn identity_scores_one() {
        let g = sets(&[
            ("a", &[(0, 3, "ORG"), (1, 2, "PER")]),
            ("b", &[(0, 1, "GPE")]),
        ]);
        let r = score(&g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn nested_label_error_halves_everything() {
        let g = sets(&[("a", &[(0, 3, "ORG"), (1, 2, "PER")])]);
        let p = sets(&[("a", &[(0, 3, "ORG"), (1, 2, "ORG")])]);
        let r = score(&g, &p).unwrap();
        assert_eq!(
            r.counts,
            Counts {
                gold: 2,
                predicted: 2,
                matched: 1
            }
        );
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert_eq!(
            r.per_label["ORG"].counts,
            Counts {
                gold: 1,
                predicted: 2,
                matched: 1
            }
        );
        assert_eq!(r.per_label["PER"].f1, 0.0);
    }

    #[test]
    fn empty_prediction_uses_zero_convention() {
        let g = sets(&[("a", &[(0, 1, "PER")])]);
        let r = score(&g, &SpanSets::new()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let nothing = score(&sets(&[("a", &[])]), &SpanSets::new()).unwrap();
        assert_eq!(nothing.f1, 0.0);
        assert_eq!(nothing.macro_f1, 0.0);
    }

    #[test]
    fn unknown_prediction_id_is_an_error() {
        let g = sets(&[("a", &[])]);
        let p = sets(&[("zz", &[(0, 1, "PER")])]);
        assert_eq!(score(&g, &p), Err(EvalError::UnknownSentence("zz".into())));
    }

    fn report_with_f1(f1: f64) -> EvalReport {
        EvalReport {
            precision: f1,
            recall: f1,
            f1,
            counts: Counts::default(),
            per_label: BTreeMap::new(),
            macro_f1: f1,
        }
    }

    #[test]
    fn aggregate_mean_and_sample_sd() {
        let s = aggregate(vec![report_with_f1(0.4), report_with_f1(0.6)]).unwrap();
        assert!((s.mean_f1 - 0.5).abs() < 1e-12);
        // sqrt(((0.1)^2 + (0.1)^2) / 1)
        assert!((s.sd_f1 - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((s.sd_f1 - 0.1414).abs() < 1e-4);

        let one = aggregate(vec![report_with_f1(0.7)]).unwrap();
        assert_eq!((one.mean_f1, one.sd_f1), (0.7, 0.0));
        let ten = aggregate(vec![report_with_f1(0.3); 10]).unwrap();
        assert_eq!(ten.sd_f1, 0.0);
        assert_eq!(aggregate(vec![]), Err(EvalError::Empty));
    }

    #[test]
    fn tables_are_aligned() {
        let g = sets(&[("a", &[(0, 1, "PER")])]);
        let r = score(&g, &g).unwrap();
        let t = render_table(&[("seed 0".into(), &r), ("seed 10".into(), &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "run           P       R      F1");
        assert_eq!(lines[2], "seed 0   100.00  100.00  100.00");
        let s = render_summary(&["s0".into()], &aggregate(vec![r]).unwrap());
        assert!(s.lines().last().unwrap().ends_with("100.00 ± 0.00"));
    }

    fn arb_sets() -> impl Strategy<Value = SpanSets> {
        let span = (
            0usize..6,
            1usize..4,
            prop::sample::select(vec!["A", "B", "C"]),
        )
            .prop_map(|(s, l, lab)| EntitySpan::new(s, s + l, lab));
        prop::collection::btree_map("[a-e]", prop::collection::btree_set(span, 0..5), 1..5)
    }

    fn restrict(pred: SpanSets, gold: &SpanSets) -> SpanSets {
        pred.into_iter()
            .filter(|(k, _)| gold.contains_key(k))
            .collect()
    }

    proptest! {
        #[test]
        fn self_score_is_one_when_nonempty(g in arb_sets()) {
            let r = score(&g, &g).unwrap();
            if r.counts.gold > 0 {
                prop_assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
            }
        }

        #[test]
        fn invariants(g in arb_sets(), p in arb_sets()) {
            let p = restrict(p, &g);
            let r = score(&g, &p).unwrap();
            prop_assert!(r.counts.matched <= r.counts.gold.min(r.counts.predicted));
            for v in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if r.precision + r.recall > 0.0 {
                let f = 2.0 * r.precision * r.recall / (r.precision + r.recall);
                prop_assert!((r.f1 - f).abs() < 1e-12);
            }
        }

        #[test]
        fn insertion_order_is_irrelevant(g in arb_sets(), p in arb_sets()) {
            let p = restrict(p, &g);
            // rebuild both maps from reversed item lists
            let rev = |m: &SpanSets| -> SpanSets {
                m.iter().rev().map(|(k, v)| (k.clone(), v.iter().rev().cloned().collect())).collect()
            };
            prop_assert_eq!(score(&g, &p).unwrap(), score(&rev(&g), &rev(&p)).unwrap());
        }

        #[test]
        fn correct_prediction_never_lowers_f1(g in arb_sets(), p in arb_sets(), pick in any::<prop::sample::Index>()) {
            let p = restrict(p, &g);
            let all: Vec<(String, EntitySpan)> =
                g.iter().flat_map(|(k, v)| v.iter().map(move |s| (k.clone(), s.clone()))).collect();
            prop_assume!(!all.is_empty());
            let (id, span) = pick.get(&all).clone();
            let before = score(&g, &p).unwrap().f1;
            let mut more = p.clone();
            more.entry(id).or_default().insert(span);
            prop_assert!(score(&g, &more).unwrap().f1 >= before - 1e-12);
        }

        #[test]
        fn wrong_prediction_never_raises_f1(g in arb_sets(), p in arb_sets(), pick in any::<prop::sample::Index>()) {
            let p = restrict(p, &g);
            let ids: Vec<&String> = g.keys().collect();
            let id = pick.get(&ids).to_string();
            // label Z never occurs in gold
            let wrong = EntitySpan::new(0, 1, "Z");
            let before = score(&g, &p).unwrap().f1;
            let mut more = p.clone();
            more.entry(id).or_default().insert(wrong);
            prop_assert!(score(&g, &more).unwrap().f1 <= before + 1e-12);
        }
    }
}
