#![allow(dead_code)]

use std::path::PathBuf;

use icl_ner::boundary::{parse_bracketed_tree, BoundaryAnnotation};
use icl_ner::corpus::{AnnotatedExample, EntitySpan, Sentence};
use icl_ner::encoders::{EncoderConfig, EncoderStack, Params, Vocabs};
use icl_ner::retriever::{
    loss_boundary_con, loss_boundary_pos, loss_label, loss_semantic, ContrastivePair, TrainingBatch,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
}

/// Random bracketing of `tokens[start..end]`, labels drawn from `phrase_labels`.
pub fn random_tree_text(tokens: &[String], phrase_labels: &[&str], rng: &mut impl Rng) -> String {
    fn leaf(t: &str) -> String {
        t.replace('(', "-LRB-").replace(')', "-RRB-")
    }
    fn go(tokens: &[String], labels: &[&str], rng: &mut impl Rng, out: &mut String) {
        let label = labels.choose(rng).unwrap();
        out.push('(');
        out.push_str(label);
        if tokens.len() == 1 {
            out.push(' ');
            out.push_str(&leaf(&tokens[0]));
        } else {
            // split into 2..=3 contiguous children
            let parts = rng.random_range(2..=tokens.len().min(3));
            let mut cuts: Vec<usize> = (1..tokens.len()).collect();
            let mut chosen = Vec::new();
            for _ in 0..parts - 1 {
                let i = rng.random_range(0..cuts.len());
                chosen.push(cuts.remove(i));
            }
            chosen.sort_unstable();
            let mut prev = 0;
            for c in chosen.into_iter().chain(std::iter::once(tokens.len())) {
                out.push(' ');
                let child = &tokens[prev..c];
                if child.len() == 1 && rng.random_bool(0.5) {
                    out.push_str(&leaf(&child[0]));
                } else {
                    go(child, labels, rng, out);
                }
                prev = c;
            }
        }
        out.push(')');
    }
    let mut out = String::new();
    go(tokens, phrase_labels, rng, &mut out);
    out
}

pub struct RandomSpec<'a> {
    pub max_len: usize,
    pub words: &'a [&'a str],
    pub tags: &'a [&'a str],
    pub phrases: &'a [&'a str],
    pub labels: &'a [&'a str],
    pub max_entities: usize,
}

pub fn random_example(id: &str, spec: &RandomSpec, rng: &mut impl Rng) -> AnnotatedExample {
    let n = rng.random_range(1..=spec.max_len);
    let tokens: Vec<String> = (0..n)
        .map(|_| spec.words.choose(rng).unwrap().to_string())
        .collect();
    let pos: Vec<String> = (0..n)
        .map(|_| spec.tags.choose(rng).unwrap().to_string())
        .collect();
    let tree_text = random_tree_text(&tokens, spec.phrases, rng);
    let tree = parse_bracketed_tree(&tree_text, &tokens).unwrap();
    let mut entities: Vec<EntitySpan> = Vec::new();
    for _ in 0..rng.random_range(0..=spec.max_entities) {
        let start = rng.random_range(0..n);
        let end = rng.random_range(start + 1..=n);
        let span = EntitySpan::new(start, end, *spec.labels.choose(rng).unwrap());
        if !entities.contains(&span) {
            entities.push(span);
        }
    }
    AnnotatedExample::new(
        Sentence::new(id, tokens).unwrap(),
        entities,
        Some(BoundaryAnnotation::new(pos, tree).unwrap()),
    )
    .unwrap()
}

/// Worst elementwise relative error between analytic and central-difference
/// gradients, over every scalar of every parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error: below this magnitude both
/// gradients are treated as zero and compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

pub fn grad_check<F>(stack: &EncoderStack, analytic: &Params, mut loss: F) -> GradCheck
where
    F: FnMut(&EncoderStack) -> f64,
{
    let mut probe = stack.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = stack.params.named().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        let len = analytic.named()[t].1.len();
        for k in 0..len {
            let original = {
                let mut tensors = probe.params.named_mut();
                let slot = tensors[t].1.as_slice_mut().unwrap();
                let o = slot[k];
                slot[k] = o + FD_STEP;
                o
            };
            let plus = loss(&probe);
            probe.params.named_mut()[t].1.as_slice_mut().unwrap()[k] = original - FD_STEP;
            let minus = loss(&probe);
            probe.params.named_mut()[t].1.as_slice_mut().unwrap()[k] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.named()[t].1.as_slice().unwrap()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            out.checked += 1;
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst_tensor = format!("{name}[{k}]");
                out.worst_analytic = a;
                out.worst_numeric = numeric;
            }
        }
    }
    out
}

const GRAD_SPEC: RandomSpec = RandomSpec {
    max_len: 5,
    words: &["a", "b", "c", "d", "e", "f", "g"],
    tags: &["DT", "NN", "VB", "IN", "JJ"],
    phrases: &["S", "NP", "VP", "PP"],
    labels: &["PER", "ORG"],
    max_entities: 3,
};

/// A small random gradient-check instance: six sentences of at most five
/// tokens, d <= 8, three pairs with up to four negatives each. Pools are
/// redrawn until both labels occur and one of them occurs twice, so the
/// label loss always has a positive and a negative.
pub struct GradInstance {
    pub pool: Vec<AnnotatedExample>,
    pub stack: EncoderStack,
    pub batch: TrainingBatch,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = loop {
        let pool: Vec<AnnotatedExample> = (0..6)
            .map(|i| random_example(&format!("e{i}"), &GRAD_SPEC, &mut rng))
            .collect();
        let count = |l: &str| {
            pool.iter()
                .flat_map(|e| &e.entities)
                .filter(|s| s.label == l)
                .count()
        };
        let (per, org) = (count("PER"), count("ORG"));
        if per >= 1 && org >= 1 && per + org >= 3 {
            break pool;
        }
    };
    let cfg = EncoderConfig {
        dim: rng.random_range(2..=8),
        token_dim: rng.random_range(2..=6),
        pos_dim: rng.random_range(2..=5),
        lstm_hidden: rng.random_range(2..=5),
        tree_dim: rng.random_range(2..=5),
        tree_hidden: rng.random_range(2..=5),
        gcn_layers: 2,
    };
    let stack = EncoderStack::new(cfg, Vocabs::build(&pool), seed);
    let mut pairs = Vec::new();
    for anchor in 0..3 {
        let positive = 3 + anchor;
        let k = rng.random_range(1..=4);
        let negatives = (0..6)
            .filter(|&x| x != anchor && x != positive)
            .take(k)
            .collect();
        pairs.push(ContrastivePair {
            anchor,
            positive,
            negatives,
        });
    }
    let temperature = rng.random_range(0.1..1.0);
    GradInstance {
        pool,
        stack,
        batch: TrainingBatch { pairs, temperature },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Semantic,
    Pos,
    Constituency,
    Label,
}

pub const LOSS_KINDS: [LossKind; 4] = [
    LossKind::Semantic,
    LossKind::Pos,
    LossKind::Constituency,
    LossKind::Label,
];

/// Gradient check of one loss on `grad_instance(seed)`.
pub fn check_loss(kind: LossKind, seed: u64) -> GradCheck {
    let GradInstance { pool, stack, batch } = grad_instance(seed);
    let all: Vec<usize> = (0..pool.len()).collect();
    // the label loss samples negatives, so reseed identically per evaluation
    let eval = |s: &EncoderStack| -> (f64, Params) {
        match kind {
            LossKind::Semantic => {
                let l = loss_semantic(&pool, s, &batch).unwrap();
                (l.value, l.grads)
            }
            LossKind::Pos => {
                let l = loss_boundary_pos(&pool, s, &batch).unwrap();
                (l.value, l.grads)
            }
            LossKind::Constituency => {
                let l = loss_boundary_con(&pool, s, &batch).unwrap();
                (l.value, l.grads)
            }
            LossKind::Label => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = loss_label(&pool, s, &all, 4, batch.temperature, &mut rng).unwrap();
                (l.value, l.grads)
            }
        }
    };
    let (_, grads) = eval(&stack);
    grad_check(&stack, &grads, |s| eval(s).0)
}

/// Three clusters of ten sentences with disjoint vocabularies, POS patterns,
/// tree shapes and entity labels. Returns the examples and cluster ids.
pub fn three_cluster_corpus(rng: &mut impl Rng) -> (Vec<AnnotatedExample>, Vec<usize>) {
    struct Cluster {
        words: &'static [&'static str],
        tags: &'static [&'static str],
        shape: fn(&[String]) -> String,
        outer: &'static str,
        inner: &'static str,
    }
    fn flat_np(t: &[String]) -> String {
        format!("(NP {})", t.join(" "))
    }
    fn right_branching(t: &[String]) -> String {
        fn go(t: &[String]) -> String {
            if t.len() == 1 {
                format!("(VP {})", t[0])
            } else {
                format!("(VP {} {})", t[0], go(&t[1..]))
            }
        }
        format!("(S {})", go(t))
    }
    fn pp_pairs(t: &[String]) -> String {
        let parts: Vec<String> = t
            .chunks(2)
            .map(|c| format!("(PP {})", c.join(" ")))
            .collect();
        format!("(FRAG {})", parts.join(" "))
    }
    let clusters = [
        Cluster {
            words: &["protein", "kinase", "binds", "receptor", "cell", "gene"],
            tags: &["NN", "NNS"],
            shape: flat_np,
            outer: "PROTEIN",
            inner: "DOMAIN",
        },
        Cluster {
            words: &["paris", "london", "visited", "city", "mayor", "river"],
            tags: &["VBD", "VBZ", "RB"],
            shape: right_branching,
            outer: "GPE",
            inner: "PER",
        },
        Cluster {
            words: &["goal", "match", "striker", "league", "score", "team"],
            tags: &["IN", "DT", "CD"],
            shape: pp_pairs,
            outer: "ORG",
            inner: "EVENT",
        },
    ];
    let mut examples = Vec::new();
    let mut groups = Vec::new();
    for (c, cluster) in clusters.iter().enumerate() {
        for i in 0..10 {
            let n = rng.random_range(4..=6);
            let tokens: Vec<String> = (0..n)
                .map(|_| cluster.words.choose(rng).unwrap().to_string())
                .collect();
            let pos: Vec<String> = (0..n)
                .map(|_| cluster.tags.choose(rng).unwrap().to_string())
                .collect();
            let tree = parse_bracketed_tree(&(cluster.shape)(&tokens), &tokens).unwrap();
            let start = rng.random_range(0..n - 1);
            let entities = vec![
                EntitySpan::new(start, start + 2, cluster.outer),
                EntitySpan::new(start, start + 1, cluster.inner),
            ];
            examples.push(
                AnnotatedExample::new(
                    Sentence::new(format!("c{c}-{i:02}"), tokens).unwrap(),
                    entities,
                    Some(BoundaryAnnotation::new(pos, tree).unwrap()),
                )
                .unwrap(),
            );
            groups.push(c);
        }
    }
    (examples, groups)
}
