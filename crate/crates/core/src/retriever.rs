//! Demonstration retriever: contrastive training of the encoder stack and
//! weighted-cosine ranking of support-set sentences.
//!
//! All three training objectives share one InfoNCE form. For an anchor `a`,
//! positive `p` and negatives `n_1..n_k`, with `s(u, v) = cos(u, v) / τ`:
//!
//! ```text
//! loss = -log( exp s(a,p) / (exp s(a,p) + Σ_k exp s(a,n_k)) )
//! ```
//!
//! averaged over every (anchor, positive) pair of a batch.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::BoundaryAnnotation;
use crate::corpus::{AnnotatedExample, Sentence};
use crate::encoders::{EncoderError, EncoderStack, Params, Tape};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("no trainable pairs")]
    NoPairs,
    #[error("label loss undefined for batch: no two entities share a label")]
    LabelLossUndefined,
    #[error("example {0} has no boundary annotation")]
    MissingBoundary(String),
    #[error("example {0} encodes to a zero vector")]
    ZeroVector(String),
    #[error("cannot build an index over an empty pool")]
    EmptyPool,
    #[error("requested {requested} demonstrations but the index holds {available}")]
    TooMany { requested: usize, available: usize },
    #[error("m must be at least 1")]
    ZeroM,
    #[error("invalid scoring weights: {0}")]
    Weights(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: total loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("index dimension mismatch: {0}")]
    Dimension(String),
    #[error("index file: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Cosine and its gradients with respect to both arguments.
fn cosine_with_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return (0.0, Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let c = a.dot(&b) / (na * nb);
    let ga = &b / (na * nb) - &a * (c / (na * na));
    let gb = &a / (na * nb) - &b * (c / (nb * nb));
    (c, ga, gb)
}

/// One InfoNCE term; indices refer to a caller-owned vector list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Mean InfoNCE loss over `pairs` and its gradient for every vector.
pub fn info_nce(
    vectors: &[Array1<f64>],
    pairs: &[ContrastivePair],
    temperature: f64,
) -> Result<(f64, Vec<Array1<f64>>), RetrieverError> {
    if pairs.is_empty() {
        return Err(RetrieverError::NoPairs);
    }
    let mut grads: Vec<Array1<f64>> = vectors.iter().map(|v| Array1::zeros(v.len())).collect();
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let a = vectors[pair.anchor].view();
        let mut others = Vec::with_capacity(1 + pair.negatives.len());
        others.push(pair.positive);
        others.extend(&pair.negatives);
        let sims: Vec<(f64, Array1<f64>, Array1<f64>)> = others
            .iter()
            .map(|&o| cosine_with_grad(a, vectors[o].view()))
            .collect();
        let logits: Vec<f64> = sims.iter().map(|(c, _, _)| c / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + denom.ln();
        total += log_z - logits[0];
        for (slot, ((&o, (_, ga, gb)), &l)) in others.iter().zip(&sims).zip(&logits).enumerate() {
            let weight = (l - log_z).exp() - if slot == 0 { 1.0 } else { 0.0 };
            let coeff = scale * weight / temperature;
            grads[pair.anchor].scaled_add(coeff, ga);
            grads[o].scaled_add(coeff, gb);
        }
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Strict lower bound on semantic cosine for a positive.
    pub threshold: f64,
    pub negatives_per_pair: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            negatives_per_pair: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPairs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    /// `negatives[j]` are the negatives drawn for `(anchor, positives[j])`.
    pub negatives: Vec<Vec<usize>>,
}

/// Positive and negative sets per anchor, as pool indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSets {
    pub anchors: Vec<AnchorPairs>,
    /// Anchors left out because nothing cleared the threshold.
    pub skipped: usize,
}

impl PairSets {
    pub fn pairs_for(&self, anchors: &[&AnchorPairs]) -> Vec<ContrastivePair> {
        anchors
            .iter()
            .flat_map(|a| {
                a.positives
                    .iter()
                    .zip(&a.negatives)
                    .map(|(&p, negs)| ContrastivePair {
                        anchor: a.anchor,
                        positive: p,
                        negatives: negs.clone(),
                    })
            })
            .collect()
    }

    pub fn all_pairs(&self) -> Vec<ContrastivePair> {
        self.pairs_for(&self.anchors.iter().collect::<Vec<_>>())
    }
}

/// `j` is a positive of `i` iff `cos(v_i, v_j) > threshold` and `j != i`.
/// Negatives per pair are a seeded uniform sample without replacement from
/// the anchor's below-threshold candidates.
pub fn pair_sets_from_vectors(
    vectors: &[Array1<f64>],
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> PairSets {
    let n = vectors.len();
    let mut sets = PairSets::default();
    for i in 0..n {
        let mut positives = Vec::new();
        let mut candidates = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if cosine(vectors[i].view(), vectors[j].view()) > cfg.threshold {
                positives.push(j);
            } else {
                candidates.push(j);
            }
        }
        if positives.is_empty() {
            sets.skipped += 1;
            continue;
        }
        let negatives = positives
            .iter()
            .map(|_| {
                let mut negs: Vec<usize> = candidates
                    .choose_multiple(rng, cfg.negatives_per_pair)
                    .copied()
                    .collect();
                negs.sort_unstable();
                negs
            })
            .collect();
        sets.anchors.push(AnchorPairs {
            anchor: i,
            positives,
            negatives,
        });
    }
    sets
}

/// Pair sets over a pool, thresholding the current semantic encoder.
pub fn build_pair_sets(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<PairSets, RetrieverError> {
    let vectors = pool
        .iter()
        .map(|ex| stack.encode_semantic(&ex.sentence))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pair_sets_from_vectors(&vectors, cfg, rng))
}

/// A loss value with gradients for every encoder parameter.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Params,
}

#[derive(Debug, Clone)]
pub struct BoundaryLoss {
    pub pos: f64,
    pub con: f64,
    pub grads: Params,
}

impl BoundaryLoss {
    pub fn value(&self) -> f64 {
        self.pos + self.con
    }
}

/// Contrastive pairs over pool indices plus the softmax temperature.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub pairs: Vec<ContrastivePair>,
    pub temperature: f64,
}

impl TrainingBatch {
    /// Distinct pool indices in the batch, ascending.
    pub fn members(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|p| {
                std::iter::once(p.anchor)
                    .chain(std::iter::once(p.positive))
                    .chain(p.negatives.iter().copied())
            })
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// Remaps pool indices in `pairs` to positions in `members`.
fn localize(pairs: &[ContrastivePair], members: &[usize]) -> Vec<ContrastivePair> {
    let pos: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &m)| (m, i)).collect();
    pairs
        .iter()
        .map(|p| ContrastivePair {
            anchor: pos[&p.anchor],
            positive: pos[&p.positive],
            negatives: p.negatives.iter().map(|n| pos[n]).collect(),
        })
        .collect()
}

/// Runs InfoNCE over one encoder's outputs and backpropagates into `grads`.
fn contrastive_through<F>(
    stack: &EncoderStack,
    members: &[usize],
    pairs: &[ContrastivePair],
    temperature: f64,
    grads: &mut Params,
    mut forward: F,
) -> Result<f64, RetrieverError>
where
    F: FnMut(usize, &mut Tape) -> Result<(Array1<f64>, crate::encoders::Handle), RetrieverError>,
{
    let mut tape = Tape::new();
    let mut vectors = Vec::with_capacity(members.len());
    let mut handles = Vec::with_capacity(members.len());
    for &m in members {
        let (v, h) = forward(m, &mut tape)?;
        vectors.push(v);
        handles.push(h);
    }
    let (value, vgrads) = info_nce(&vectors, &localize(pairs, members), temperature)?;
    for (h, g) in handles.into_iter().zip(&vgrads) {
        stack.backward(&tape, h, g.view(), grads)?;
    }
    Ok(value)
}

/// Sentence-level semantic contrastive loss.
pub fn loss_semantic(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    batch: &TrainingBatch,
) -> Result<LossValue, RetrieverError> {
    if batch.pairs.is_empty() {
        return Err(RetrieverError::NoPairs);
    }
    let members = batch.members();
    let mut grads = stack.params.zeros_like();
    let value = contrastive_through(
        stack,
        &members,
        &batch.pairs,
        batch.temperature,
        &mut grads,
        |m, tape| Ok(stack.forward_semantic(&pool[m].sentence, tape)?),
    )?;
    Ok(LossValue { value, grads })
}

fn boundary_of(ex: &AnnotatedExample) -> Result<&BoundaryAnnotation, RetrieverError> {
    ex.boundary
        .as_ref()
        .ok_or_else(|| RetrieverError::MissingBoundary(ex.id().to_string()))
}

fn boundary_members(
    pool: &[AnnotatedExample],
    batch: &TrainingBatch,
) -> Result<Vec<usize>, RetrieverError> {
    if batch.pairs.is_empty() {
        return Err(RetrieverError::NoPairs);
    }
    let members = batch.members();
    for &m in &members {
        boundary_of(&pool[m])?;
    }
    Ok(members)
}

/// Contrastive loss over POS-sequence vectors.
pub fn loss_boundary_pos(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    batch: &TrainingBatch,
) -> Result<LossValue, RetrieverError> {
    let members = boundary_members(pool, batch)?;
    let mut grads = stack.params.zeros_like();
    let value = contrastive_through(
        stack,
        &members,
        &batch.pairs,
        batch.temperature,
        &mut grads,
        |m, tape| Ok(stack.forward_pos(&boundary_of(&pool[m])?.pos, tape)?),
    )?;
    Ok(LossValue { value, grads })
}

/// Contrastive loss over constituency-tree vectors.
pub fn loss_boundary_con(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    batch: &TrainingBatch,
) -> Result<LossValue, RetrieverError> {
    let members = boundary_members(pool, batch)?;
    let mut grads = stack.params.zeros_like();
    let value = contrastive_through(
        stack,
        &members,
        &batch.pairs,
        batch.temperature,
        &mut grads,
        |m, tape| Ok(stack.forward_tree(&boundary_of(&pool[m])?.graph(), tape)?),
    )?;
    Ok(LossValue { value, grads })
}

/// Boundary loss: the same pairs contrasted once over POS-sequence vectors
/// and once over tree vectors, summed.
pub fn loss_boundary(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    batch: &TrainingBatch,
) -> Result<BoundaryLoss, RetrieverError> {
    let pos = loss_boundary_pos(pool, stack, batch)?;
    let mut con = loss_boundary_con(pool, stack, batch)?;
    con.grads.add_scaled(&pos.grads, 1.0);
    Ok(BoundaryLoss {
        pos: pos.value,
        con: con.value,
        grads: con.grads,
    })
}

/// An entity with its representation, for the label objective.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRep {
    /// Sentence the entity comes from; overlap is only checked within one.
    pub example: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub vector: Array1<f64>,
}

impl EntityRep {
    fn overlaps(&self, other: &EntityRep) -> bool {
        self.example == other.example && self.start < other.end && other.start < self.end
    }
}

/// Entity-level pairs: positives share a label; negatives carry a different
/// label. Different-label entities overlapping the anchor in the same
/// sentence are always negatives; the rest of the `negatives_per_pair`
/// budget is sampled uniformly from the other different-label entities.
pub fn label_pairs(
    reps: &[EntityRep],
    negatives_per_pair: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ContrastivePair>, RetrieverError> {
    let mut pairs = Vec::new();
    for (i, anchor) in reps.iter().enumerate() {
        let mut forced = Vec::new();
        let mut optional = Vec::new();
        for (k, other) in reps.iter().enumerate() {
            if k != i && other.label != anchor.label {
                if anchor.overlaps(other) {
                    forced.push(k);
                } else {
                    optional.push(k);
                }
            }
        }
        for (j, positive) in reps.iter().enumerate() {
            if j == i || positive.label != anchor.label {
                continue;
            }
            let budget = negatives_per_pair.saturating_sub(forced.len());
            let mut negatives = forced.clone();
            negatives.extend(optional.choose_multiple(rng, budget).copied());
            negatives.sort_unstable();
            pairs.push(ContrastivePair {
                anchor: i,
                positive: j,
                negatives,
            });
        }
    }
    if pairs.is_empty() {
        return Err(RetrieverError::LabelLossUndefined);
    }
    Ok(pairs)
}

/// Label loss over all entities of the given pool examples.
pub fn loss_label(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    examples: &[usize],
    negatives_per_pair: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<LossValue, RetrieverError> {
    let mut tape = Tape::new();
    let mut reps = Vec::new();
    let mut handles = Vec::new();
    for &e in examples {
        let ex = &pool[e];
        for span in &ex.entities {
            let (vector, h) = stack.forward_entity(&ex.sentence, span, &mut tape)?;
            reps.push(EntityRep {
                example: e,
                start: span.start,
                end: span.end,
                label: span.label.clone(),
                vector,
            });
            handles.push(h);
        }
    }
    let pairs = label_pairs(&reps, negatives_per_pair, rng)?;
    let vectors: Vec<Array1<f64>> = reps.into_iter().map(|r| r.vector).collect();
    let (value, vgrads) = info_nce(&vectors, &pairs, temperature)?;
    let mut grads = stack.params.zeros_like();
    for (h, g) in handles.into_iter().zip(&vgrads) {
        stack.backward(&tape, h, g.view(), &mut grads)?;
    }
    Ok(LossValue { value, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub semantic: f64,
    pub boundary: f64,
    pub label: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            semantic: 1.0,
            boundary: 1.0,
            label: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Anchors per SGD step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub loss_weights: LossWeights,
    pub threshold: f64,
    pub negatives_per_pair: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.1,
            temperature: 0.1,
            loss_weights: LossWeights::default(),
            threshold: 0.5,
            negatives_per_pair: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), RetrieverError> {
        let bad = |m: &str| Err(RetrieverError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        let w = self.loss_weights;
        if [w.semantic, w.boundary, w.label]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Mean losses over the SGD steps of one epoch, measured before each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub l_sem: f64,
    pub l_bdy_pos: f64,
    pub l_bdy_con: f64,
    pub l_lab: f64,
    pub total: f64,
    pub steps: usize,
    pub anchors: usize,
    pub skipped_anchors: usize,
    /// Steps whose batch had no same-label entity pair.
    pub label_steps_skipped: usize,
}

/// Plain SGD on `λ_sem·L_sem + λ_bdy·(L_pos + L_con) + λ_lab·L_lab`.
///
/// Pair sets are rebuilt from the current semantic encoder at the start of
/// every epoch. With a frozen external semantic encoder the semantic and
/// label terms carry no trainable parameters and are skipped.
pub fn train(
    pool: &[AnnotatedExample],
    initial: EncoderStack,
    cfg: &TrainConfig,
) -> Result<(EncoderStack, Vec<LossReport>), RetrieverError> {
    cfg.validate()?;
    for ex in pool {
        boundary_of(ex)?;
    }
    let mut stack = initial;
    let trainable_semantic = stack.semantic.is_trainable();
    let pair_cfg = PairConfig {
        threshold: cfg.threshold,
        negatives_per_pair: cfg.negatives_per_pair,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let sets = build_pair_sets(pool, &stack, &pair_cfg, &mut rng)?;
        let mut order: Vec<&AnchorPairs> = sets.anchors.iter().collect();
        order.shuffle(&mut rng);

        let mut report = LossReport {
            epoch,
            l_sem: 0.0,
            l_bdy_pos: 0.0,
            l_bdy_con: 0.0,
            l_lab: 0.0,
            total: 0.0,
            steps: 0,
            anchors: sets.anchors.len(),
            skipped_anchors: sets.skipped,
            label_steps_skipped: 0,
        };
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = TrainingBatch {
                pairs: sets.pairs_for(chunk),
                temperature: cfg.temperature,
            };
            let w = cfg.loss_weights;
            let mut grads = stack.params.zeros_like();
            let mut total = 0.0;

            if trainable_semantic && w.semantic > 0.0 {
                let sem = loss_semantic(pool, &stack, &batch)?;
                report.l_sem += sem.value;
                total += w.semantic * sem.value;
                grads.add_scaled(&sem.grads, w.semantic);
            }
            if w.boundary > 0.0 {
                let bdy = loss_boundary(pool, &stack, &batch)?;
                report.l_bdy_pos += bdy.pos;
                report.l_bdy_con += bdy.con;
                total += w.boundary * bdy.value();
                grads.add_scaled(&bdy.grads, w.boundary);
            }
            if trainable_semantic && w.label > 0.0 {
                let mut members: Vec<usize> = chunk
                    .iter()
                    .flat_map(|a| std::iter::once(a.anchor).chain(a.positives.iter().copied()))
                    .collect();
                members.sort_unstable();
                members.dedup();
                match loss_label(
                    pool,
                    &stack,
                    &members,
                    cfg.negatives_per_pair,
                    cfg.temperature,
                    &mut rng,
                ) {
                    Ok(lab) => {
                        report.l_lab += lab.value;
                        total += w.label * lab.value;
                        grads.add_scaled(&lab.grads, w.label);
                    }
                    Err(RetrieverError::LabelLossUndefined) => report.label_steps_skipped += 1,
                    Err(e) => return Err(e),
                }
            }

            if !total.is_finite() || !grads.all_finite() {
                return Err(RetrieverError::Diverged {
                    epoch,
                    step,
                    loss: total,
                });
            }
            report.total += total;
            report.steps += 1;
            stack.params.add_scaled(&grads, -cfg.learning_rate);
        }
        if report.steps > 0 {
            let s = report.steps as f64;
            report.l_sem /= s;
            report.l_bdy_pos /= s;
            report.l_bdy_con /= s;
            report.total /= s;
            let label_steps = report.steps - report.label_steps_skipped;
            if label_steps > 0 {
                report.l_lab /= label_steps as f64;
            }
        } else {
            log::warn!(
                "epoch {epoch}: no anchor has a positive above threshold {}",
                cfg.threshold
            );
        }
        log::debug!("epoch {epoch}: total {:.6}", report.total);
        trace.push(report);
    }
    Ok((stack, trace))
}

/// Weights of the semantic, POS and tree cosines in the retrieval score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringWeights {
    pub semantic: f64,
    pub pos: f64,
    pub tree: f64,
}

impl Default for ScoringWeights {
    fn default() -> Self {
        Self {
            semantic: 0.5,
            pos: 0.25,
            tree: 0.25,
        }
    }
}

impl ScoringWeights {
    pub fn new(semantic: f64, pos: f64, tree: f64) -> Result<Self, RetrieverError> {
        let w = Self {
            semantic,
            pos,
            tree,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RetrieverError> {
        let parts = [self.semantic, self.pos, self.tree];
        if parts.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(RetrieverError::Weights(format!(
                "{parts:?} must be non-negative"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RetrieverError::Weights(format!(
                "{parts:?} sums to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Unit-normalized semantic, POS and tree vectors of one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorTriple {
    pub semantic: Vec<f64>,
    pub pos: Vec<f64>,
    pub tree: Vec<f64>,
}

fn unit(v: Array1<f64>, id: &str) -> Result<Vec<f64>, RetrieverError> {
    let n = norm(v.view());
    if n == 0.0 || !n.is_finite() {
        return Err(RetrieverError::ZeroVector(id.to_string()));
    }
    Ok((v / n).to_vec())
}

impl VectorTriple {
    pub fn encode(
        stack: &EncoderStack,
        sentence: &Sentence,
        boundary: &BoundaryAnnotation,
    ) -> Result<Self, RetrieverError> {
        Ok(VectorTriple {
            semantic: unit(stack.encode_semantic(sentence)?, &sentence.id)?,
            pos: unit(stack.encode_pos(&boundary.pos)?, &sentence.id)?,
            tree: unit(stack.encode_tree(&boundary.graph())?, &sentence.id)?,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vectors: VectorTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

/// Immutable store of per-example vector triples, searched by linear scan.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    weights: ScoringWeights,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    dim: usize,
    weights: ScoringWeights,
    size: usize,
}

pub fn build_index(
    pool: &[AnnotatedExample],
    stack: &EncoderStack,
    weights: ScoringWeights,
) -> Result<RetrievalIndex, RetrieverError> {
    weights.validate()?;
    if pool.is_empty() {
        return Err(RetrieverError::EmptyPool);
    }
    let entries = pool
        .iter()
        .map(|ex| {
            Ok(IndexEntry {
                id: ex.id().to_string(),
                vectors: VectorTriple::encode(stack, &ex.sentence, boundary_of(ex)?)?,
            })
        })
        .collect::<Result<Vec<_>, RetrieverError>>()?;
    Ok(RetrievalIndex {
        dim: stack.dim(),
        weights,
        entries,
    })
}

/// Descending score, then ascending id.
fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> ScoringWeights {
        self.weights
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn score(&self, query: &VectorTriple, entry: &IndexEntry) -> f64 {
        let w = self.weights;
        w.semantic * dot(&query.semantic, &entry.vectors.semantic)
            + w.pos * dot(&query.pos, &entry.vectors.pos)
            + w.tree * dot(&query.tree, &entry.vectors.tree)
    }

    /// Top `m` entries by weighted cosine.
    pub fn retrieve(&self, query: &VectorTriple, m: usize) -> Result<Vec<Ranked>, RetrieverError> {
        if m == 0 {
            return Err(RetrieverError::ZeroM);
        }
        if m > self.entries.len() {
            return Err(RetrieverError::TooMany {
                requested: m,
                available: self.entries.len(),
            });
        }
        for (name, v) in [
            ("semantic", &query.semantic),
            ("pos", &query.pos),
            ("tree", &query.tree),
        ] {
            if v.len() != self.dim {
                return Err(RetrieverError::Dimension(format!(
                    "query {name} vector has {} entries, index dim is {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        let mut scored: Vec<Ranked> = self
            .entries
            .iter()
            .map(|e| Ranked {
                id: e.id.clone(),
                score: self.score(query, e),
            })
            .collect();
        if m < scored.len() {
            scored.select_nth_unstable_by(m - 1, rank_order);
            scored.truncate(m);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrieverError> {
        let path = path.as_ref();
        let io = |source| RetrieverError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let header = IndexHeader {
            format_version: INDEX_FORMAT_VERSION,
            dim: self.dim,
            weights: self.weights,
            size: self.entries.len(),
        };
        let fmt = |e: serde_json::Error| RetrieverError::Format(e.to_string());
        serde_json::to_writer(&mut w, &header).map_err(fmt)?;
        w.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(fmt)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrieverError> {
        use std::io::BufRead;
        let path = path.as_ref();
        let io = |source| RetrieverError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
        let fmt = |e: serde_json::Error| RetrieverError::Format(e.to_string());
        let header: IndexHeader = serde_json::from_str(
            &lines
                .next()
                .ok_or_else(|| RetrieverError::Format("missing header".into()))?
                .map_err(io)?,
        )
        .map_err(fmt)?;
        if header.format_version != INDEX_FORMAT_VERSION {
            return Err(RetrieverError::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        header.weights.validate()?;
        let mut entries = Vec::with_capacity(header.size);
        for line in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let e: IndexEntry = serde_json::from_str(&line).map_err(fmt)?;
            for v in [&e.vectors.semantic, &e.vectors.pos, &e.vectors.tree] {
                if v.len() != header.dim {
                    return Err(RetrieverError::Dimension(format!(
                        "entry {} has wrong dimension",
                        e.id
                    )));
                }
            }
            entries.push(e);
        }
        if entries.len() != header.size {
            return Err(RetrieverError::Format(format!(
                "header declares {} entries, found {}",
                header.size,
                entries.len()
            )));
        }
        if entries.is_empty() {
            return Err(RetrieverError::EmptyPool);
        }
        Ok(RetrievalIndex {
            dim: header.dim,
            weights: header.weights,
            entries,
        })
    }
}

/// A trained stack paired with an index built from it.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub stack: EncoderStack,
    pub index: RetrievalIndex,
}

impl Retriever {
    pub fn new(
        stack: EncoderStack,
        pool: &[AnnotatedExample],
        weights: ScoringWeights,
    ) -> Result<Self, RetrieverError> {
        let index = build_index(pool, &stack, weights)?;
        Ok(Self { stack, index })
    }

    pub fn retrieve(
        &self,
        sentence: &Sentence,
        boundary: &BoundaryAnnotation,
        m: usize,
    ) -> Result<Vec<Ranked>, RetrieverError> {
        let q = VectorTriple::encode(&self.stack, sentence, boundary)?;
        self.index.retrieve(&q, m)
    }
}

/// Mean pairwise cosine within and across groups, for diagnostics.
pub fn cluster_cosines(vectors: &[Array1<f64>], groups: &[usize]) -> (f64, f64) {
    let mut sums: BTreeMap<bool, (f64, usize)> = BTreeMap::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let e = sums.entry(groups[i] == groups[j]).or_insert((0.0, 0));
            e.0 += cosine(vectors[i].view(), vectors[j].view());
            e.1 += 1;
        }
    }
    let mean = |k| sums.get(&k).map_or(0.0, |&(s, n)| s / n as f64);
    (mean(true), mean(false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn oracle() -> f64 {
        let e = std::f64::consts::E;
        -(e / (e + 1.0)).ln()
    }

    #[test]
    fn info_nce_hand_case() {
        let v = vec![arr1(&[1.0, 0.0]), arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])];
        let pairs = [ContrastivePair {
            anchor: 0,
            positive: 1,
            negatives: vec![2],
        }];
        let (loss, _) = info_nce(&v, &pairs, 1.0).unwrap();
        assert!((loss - oracle()).abs() < 1e-12);
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn info_nce_without_negatives_is_zero() {
        let v = vec![arr1(&[1.0, 2.0]), arr1(&[-3.0, 0.5])];
        let pairs = [ContrastivePair {
            anchor: 0,
            positive: 1,
            negatives: vec![],
        }];
        let (loss, grads) = info_nce(&v, &pairs, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn info_nce_scale_invariant() {
        let v = vec![
            arr1(&[0.3, -1.0, 2.0]),
            arr1(&[1.0, 0.2, 0.1]),
            arr1(&[-0.5, 0.5, 0.9]),
        ];
        let pairs = [ContrastivePair {
            anchor: 0,
            positive: 1,
            negatives: vec![2],
        }];
        let (a, _) = info_nce(&v, &pairs, 0.2).unwrap();
        let mut w = v.clone();
        w[1] *= 2.0;
        let (b, _) = info_nce(&w, &pairs, 0.2).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_errors() {
        assert!(matches!(
            info_nce(&[], &[], 1.0),
            Err(RetrieverError::NoPairs)
        ));
    }

    #[test]
    fn identical_vectors_are_mutual_positives() {
        let v = vec![arr1(&[1.0, 1.0]), arr1(&[1.0, 1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets = pair_sets_from_vectors(&v, &PairConfig::default(), &mut rng);
        assert_eq!(sets.anchors.len(), 2);
        assert_eq!(sets.anchors[0].positives, [1]);
        assert_eq!(sets.anchors[1].positives, [0]);
    }

    #[test]
    fn orthogonal_vectors_skipped() {
        let v = vec![arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets = pair_sets_from_vectors(&v, &PairConfig::default(), &mut rng);
        assert!(sets.anchors.is_empty());
        assert_eq!(sets.skipped, 2);
    }

    #[test]
    fn threshold_is_strict() {
        // |(1,1,1,1)| = 2 exactly, so the cosine below is exactly 0.5.
        let v = vec![
            arr1(&[1.0, 0.0, 0.0, 0.0]),
            arr1(&[1.0, 1.0, 1.0, 1.0]),
            arr1(&[2.0, 0.0, 0.0, 0.0]),
        ];
        assert_eq!(cosine(v[0].view(), v[1].view()), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets = pair_sets_from_vectors(&v, &PairConfig::default(), &mut rng);
        let a0 = sets.anchors.iter().find(|a| a.anchor == 0).unwrap();
        assert_eq!(a0.positives, [2]);
        assert_eq!(a0.negatives, [vec![1]]);
    }

    fn rep(example: usize, start: usize, end: usize, label: &str, v: &[f64]) -> EntityRep {
        EntityRep {
            example,
            start,
            end,
            label: label.into(),
            vector: arr1(v),
        }
    }

    #[test]
    fn label_hand_case() {
        let reps = vec![
            rep(0, 0, 1, "PER", &[1.0, 0.0]),
            rep(1, 0, 1, "PER", &[1.0, 0.0]),
            rep(2, 0, 1, "ORG", &[0.0, 1.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = label_pairs(&reps, 1, &mut rng).unwrap();
        assert_eq!(pairs.len(), 2);
        let vectors: Vec<_> = reps.iter().map(|r| r.vector.clone()).collect();
        let (loss, _) = info_nce(&vectors, &pairs, 1.0).unwrap();
        assert!((loss - oracle()).abs() < 1e-12);
    }

    #[test]
    fn overlapping_different_label_always_negative() {
        // Entity 0 (ORG [0,3)) nests entity 1 (PER [1,2)) in sentence 0.
        // Many other ORG/PER entities compete for a budget of one negative.
        let mut reps = vec![
            rep(0, 0, 3, "ORG", &[1.0, 0.0]),
            rep(0, 1, 2, "PER", &[0.0, 1.0]),
        ];
        for i in 1..10 {
            reps.push(rep(i, 0, 1, "ORG", &[1.0, 0.1]));
            reps.push(rep(i, 1, 2, "PER", &[0.1, 1.0]));
        }
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = label_pairs(&reps, 1, &mut rng).unwrap();
            for p in pairs.iter().filter(|p| p.anchor == 0) {
                assert_eq!(p.negatives, [1]);
            }
            for p in pairs.iter().filter(|p| p.anchor == 1) {
                assert_eq!(p.negatives, [0]);
            }
        }
    }

    #[test]
    fn single_label_batch_errors() {
        let reps = vec![rep(0, 0, 1, "PER", &[1.0]), rep(1, 0, 1, "ORG", &[1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            label_pairs(&reps, 2, &mut rng),
            Err(RetrieverError::LabelLossUndefined)
        ));
    }

    #[test]
    fn weights_validated() {
        assert!(ScoringWeights::new(0.5, 0.25, 0.25).is_ok());
        assert!(ScoringWeights::new(0.5, 0.5, 0.5).is_err());
        assert!(ScoringWeights::new(1.5, -0.5, 0.0).is_err());
    }

    fn entry(id: &str, s: &[f64], p: &[f64], t: &[f64]) -> IndexEntry {
        IndexEntry {
            id: id.into(),
            vectors: VectorTriple {
                semantic: s.to_vec(),
                pos: p.to_vec(),
                tree: t.to_vec(),
            },
        }
    }

    #[test]
    fn retrieve_ties_break_by_id_and_bounds() {
        let idx = RetrievalIndex {
            dim: 2,
            weights: ScoringWeights::new(1.0, 0.0, 0.0).unwrap(),
            entries: vec![
                entry("c", &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]),
                entry("a", &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]),
                entry("b", &[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]),
            ],
        };
        let q = VectorTriple {
            semantic: vec![1.0, 0.0],
            pos: vec![1.0, 0.0],
            tree: vec![1.0, 0.0],
        };
        let r = idx.retrieve(&q, 3).unwrap();
        let ids: Vec<_> = r.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert_eq!(r[0].score, 1.0);
        assert_eq!(idx.retrieve(&q, 1).unwrap()[0].id, "a");
        assert!(matches!(
            idx.retrieve(&q, 4),
            Err(RetrieverError::TooMany { .. })
        ));
        assert!(matches!(idx.retrieve(&q, 0), Err(RetrieverError::ZeroM)));
    }

    #[test]
    fn index_file_round_trip() {
        let idx = RetrievalIndex {
            dim: 2,
            weights: ScoringWeights::default(),
            entries: vec![entry("x", &[0.6, 0.8], &[1.0, 0.0], &[0.0, 1.0])],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.jsonl");
        idx.save(&p).unwrap();
        assert_eq!(RetrievalIndex::load(&p).unwrap(), idx);
    }
}
