//! Nested-NER corpus data model, JSONL ingestion and k-shot support-set sampling.
//!
//! Spans use 0-based, half-open token offsets: `[start, end)`. A span that a
//! reader would write as words `p..=q` (1-based, inclusive) is stored as
//! `start = p - 1`, `end = q`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{self, BoundaryAnnotation, BoundaryError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: example {id}: {message}")]
    InvalidExample {
        line: usize,
        id: String,
        message: String,
    },
    #[error("example {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("line {line}: duplicate example id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("label set header must be the first record (found on line {line})")]
    LateHeader { line: usize },
    #[error("label set contains duplicate label {0}")]
    DuplicateLabel(String),
    #[error("insufficient entity instances for k={k}: {}", .deficient.join(", "))]
    Deficient { k: usize, deficient: Vec<String> },
    #[error("k must be positive")]
    ZeroK,
}

/// A tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self, CorpusError> {
        let sentence = Self {
            id: id.into(),
            tokens,
        };
        sentence.validate()?;
        Ok(sentence)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        if self.tokens.is_empty() {
            return Err(invalid("sentence has no tokens".into()));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(invalid(format!("token {i} is empty")));
            }
            if tok.contains('\n') || tok.contains('\r') {
                return Err(invalid(format!("token {i} contains a newline")));
            }
        }
        Ok(())
    }
}

/// An entity mention covering tokens `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// True when the two spans share at least one token.
    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// True when `other` lies inside `self` (boundaries may coincide).
    pub fn contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn surface<'a>(&self, sentence: &'a Sentence) -> &'a [String] {
        &sentence.tokens[self.start..self.end]
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.start, self.end, self.label)
    }
}

/// Ordered set of entity type labels. Order is significant: it is rendered
/// into prompts verbatim.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(CorpusError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push_if_absent(&mut self, label: &str) {
        if !self.contains(label) {
            self.labels.push(label.to_string());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedExample {
    pub sentence: Sentence,
    /// Kept sorted by `(start, end, label)`; no exact duplicates.
    pub entities: Vec<EntitySpan>,
    pub boundary: Option<BoundaryAnnotation>,
}

impl AnnotatedExample {
    pub fn new(
        sentence: Sentence,
        entities: Vec<EntitySpan>,
        boundary: Option<BoundaryAnnotation>,
    ) -> Result<Self, CorpusError> {
        let mut ex = Self {
            sentence,
            entities,
            boundary,
        };
        ex.entities.sort();
        ex.validate()?;
        Ok(ex)
    }

    pub fn id(&self) -> &str {
        &self.sentence.id
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.sentence.validate()?;
        let n = self.sentence.len();
        let invalid = |message: String| CorpusError::Invalid {
            id: self.sentence.id.clone(),
            message,
        };
        let mut seen = HashSet::new();
        for e in &self.entities {
            if e.start >= e.end {
                return Err(invalid(format!(
                    "span start {} must be < end {}",
                    e.start, e.end
                )));
            }
            if e.end > n {
                return Err(invalid(format!(
                    "span end {} > sentence length {}",
                    e.end, n
                )));
            }
            if e.label.is_empty() {
                return Err(invalid("empty entity label".into()));
            }
            if !seen.insert(e) {
                return Err(invalid(format!("duplicate entity {e}")));
            }
        }
        if let Some(b) = &self.boundary {
            b.check_len(n).map_err(|err| invalid(err.to_string()))?;
        }
        Ok(())
    }

    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entities {
            *counts.entry(e.label.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotConfig {
    /// Entity instances required per label.
    pub k: usize,
    pub seed: u64,
}

/// A loaded, validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: LabelSet,
    pub examples: Vec<AnnotatedExample>,
    /// True when the file began with an explicit `label_set` header.
    pub explicit_labels: bool,
}

#[derive(Serialize, Deserialize)]
struct RawEntity {
    start: i64,
    end: i64,
    label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<RawEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constituency: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    label_set: Vec<String>,
}

/// Parse one JSONL record (without line context).
fn example_from_raw(raw: RawRecord) -> Result<AnnotatedExample, (String, String)> {
    let id = raw.id.clone();
    let fail = |m: String| (id.clone(), m);
    let n = raw.tokens.len();
    let mut entities = Vec::with_capacity(raw.entities.len());
    for e in raw.entities {
        if e.start < 0 || e.end < 0 {
            return Err(fail(format!(
                "negative span offset ({}, {})",
                e.start, e.end
            )));
        }
        if e.end as usize > n {
            return Err(fail(format!("span end {} > sentence length {}", e.end, n)));
        }
        entities.push(EntitySpan::new(e.start as usize, e.end as usize, e.label));
    }
    let boundary = match (raw.pos, raw.constituency) {
        (None, None) => None,
        (Some(pos), Some(tree)) => {
            let tree = boundary::parse_bracketed_tree(&tree, &raw.tokens)
                .map_err(|e: BoundaryError| fail(e.to_string()))?;
            Some(BoundaryAnnotation::new(pos, tree).map_err(|e| fail(e.to_string()))?)
        }
        (Some(_), None) => return Err(fail("`pos` given without `constituency`".into())),
        (None, Some(_)) => return Err(fail("`constituency` given without `pos`".into())),
    };
    let sentence = Sentence {
        id: raw.id,
        tokens: raw.tokens,
    };
    AnnotatedExample::new(sentence, entities, boundary).map_err(|e| match e {
        CorpusError::Invalid { message, .. } => fail(message),
        other => fail(other.to_string()),
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Reads JSONL from any buffered reader. Blank lines are skipped.
pub fn read_dataset(reader: impl BufRead) -> Result<Dataset, CorpusError> {
    let mut header: Option<LabelSet> = None;
    let mut seen_labels = LabelSet::default();
    let mut examples = Vec::new();
    let mut ids = HashSet::new();
    let mut first_record = true;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: lineno,
                message: e.to_string(),
            })?;
        if value.get("label_set").is_some() {
            if !first_record {
                return Err(CorpusError::LateHeader { line: lineno });
            }
            let raw: RawHeader =
                serde_json::from_value(value).map_err(|e| CorpusError::MalformedLine {
                    line: lineno,
                    message: e.to_string(),
                })?;
            header = Some(LabelSet::new(raw.label_set)?);
            first_record = false;
            continue;
        }
        first_record = false;
        let raw: RawRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::MalformedLine {
                line: lineno,
                message: e.to_string(),
            })?;
        let ex = example_from_raw(raw).map_err(|(id, message)| CorpusError::InvalidExample {
            line: lineno,
            id,
            message,
        })?;
        if !ids.insert(ex.sentence.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: lineno,
                id: ex.sentence.id.clone(),
            });
        }
        for e in &ex.entities {
            match &header {
                Some(h) if !h.contains(&e.label) => {
                    return Err(CorpusError::InvalidExample {
                        line: lineno,
                        id: ex.sentence.id.clone(),
                        message: format!("unknown label {} (not in label set header)", e.label),
                    })
                }
                Some(_) => {}
                None => seen_labels.push_if_absent(&e.label),
            }
        }
        examples.push(ex);
    }

    let explicit_labels = header.is_some();
    Ok(Dataset {
        labels: header.unwrap_or(seen_labels),
        examples,
        explicit_labels,
    })
}

fn example_to_raw(ex: &AnnotatedExample) -> RawRecord {
    RawRecord {
        id: ex.sentence.id.clone(),
        tokens: ex.sentence.tokens.clone(),
        entities: ex
            .entities
            .iter()
            .map(|e| RawEntity {
                start: e.start as i64,
                end: e.end as i64,
                label: e.label.clone(),
            })
            .collect(),
        pos: ex.boundary.as_ref().map(|b| b.pos.tags.clone()),
        constituency: ex.boundary.as_ref().map(|b| b.tree.render()),
    }
}

/// One JSONL line for `ex`, without the trailing newline.
pub fn example_to_json(ex: &AnnotatedExample) -> String {
    serde_json::to_string(&example_to_raw(ex)).expect("record serialization is infallible")
}

pub fn write_dataset(
    mut w: impl Write,
    labels: Option<&LabelSet>,
    examples: &[AnnotatedExample],
) -> std::io::Result<()> {
    if let Some(labels) = labels {
        let header = RawHeader {
            label_set: labels.as_slice().to_vec(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
    }
    for ex in examples {
        writeln!(w, "{}", example_to_json(ex))?;
    }
    Ok(())
}

/// Count entity instances per label across `pool`, for every label in `labels`.
fn pool_counts(pool: &[AnnotatedExample], labels: &LabelSet) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = labels.iter().map(|l| (l.to_string(), 0)).collect();
    for ex in pool {
        for e in &ex.entities {
            if let Some(c) = counts.get_mut(&e.label) {
                *c += 1;
            }
        }
    }
    counts
}

/// Greedy seeded k-shot sampling: every label in `labels` ends up with at
/// least `k` entity instances in the returned support set.
///
/// The pool is shuffled with `cfg.seed`; sentences are taken in that order
/// whenever they contribute to a label still below `k`. A second pass in the
/// same order drops any sentence whose removal keeps every label at `k` or
/// more, so no returned sentence is redundant.
pub fn sample_k_shot(
    pool: &[AnnotatedExample],
    labels: &LabelSet,
    cfg: KShotConfig,
) -> Result<Vec<AnnotatedExample>, CorpusError> {
    if cfg.k == 0 {
        return Err(CorpusError::ZeroK);
    }
    let available = pool_counts(pool, labels);
    let deficient: Vec<String> = labels
        .iter()
        .filter_map(|l| {
            let have = available[l];
            (have < cfg.k).then(|| format!("{l}: {have} < {}", cfg.k))
        })
        .collect();
    if !deficient.is_empty() {
        return Err(CorpusError::Deficient {
            k: cfg.k,
            deficient,
        });
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);

    let mut counts: BTreeMap<&str, usize> = labels.iter().map(|l| (l, 0)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for &i in &order {
        if counts.values().all(|&c| c >= cfg.k) {
            break;
        }
        let ex_counts = pool[i].label_counts();
        let helps = ex_counts
            .keys()
            .any(|l| counts.get(l).is_some_and(|&c| c < cfg.k));
        if helps {
            for (l, c) in ex_counts {
                if let Some(total) = counts.get_mut(l) {
                    *total += c;
                }
            }
            chosen.push(i);
        }
    }

    // Pruning pass.
    let mut keep = vec![true; chosen.len()];
    for (slot, &i) in chosen.iter().enumerate() {
        let ex_counts = pool[i].label_counts();
        let removable = ex_counts
            .iter()
            .all(|(l, &c)| counts.get(l).is_none_or(|&total| total - c >= cfg.k));
        if removable {
            keep[slot] = false;
            for (l, c) in ex_counts {
                if let Some(total) = counts.get_mut(l) {
                    *total -= c;
                }
            }
        }
    }

    Ok(chosen
        .into_iter()
        .zip(keep)
        .filter_map(|(i, k)| k.then(|| pool[i].clone()))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestingStats {
    pub sentences: usize,
    pub entities: usize,
    /// Unordered span pairs within a sentence that share no token.
    pub flat: usize,
    /// Pairs that intersect without either containing the other.
    pub overlapping: usize,
    /// Pairs where one span contains the other.
    pub nested: usize,
}

/// Pairwise span relations, counted per sentence over unordered pairs.
///
/// Spans with identical offsets but different labels count as nested.
pub fn nesting_stats(examples: &[AnnotatedExample]) -> NestingStats {
    let mut stats = NestingStats::default();
    for ex in examples {
        stats.sentences += 1;
        stats.entities += ex.entities.len();
        for (i, a) in ex.entities.iter().enumerate() {
            for b in &ex.entities[i + 1..] {
                if a.contains(b) || b.contains(a) {
                    stats.nested += 1;
                } else if a.overlaps(b) {
                    stats.overlapping += 1;
                } else {
                    stats.flat += 1;
                }
            }
        }
    }
    stats
}

/// Labels in order of first appearance across the examples.
pub fn labels_of(examples: &[AnnotatedExample]) -> LabelSet {
    let mut set = LabelSet::default();
    for ex in examples {
        for e in &ex.entities {
            set.push_if_absent(&e.label);
        }
    }
    set
}

/// Gold span sets keyed by example id.
pub fn gold_spans(examples: &[AnnotatedExample]) -> BTreeMap<String, BTreeSet<EntitySpan>> {
    examples
        .iter()
        .map(|ex| {
            (
                ex.sentence.id.clone(),
                ex.entities.iter().cloned().collect::<BTreeSet<_>>(),
            )
        })
        .collect()
}
