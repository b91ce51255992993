//! Sentence, POS-sequence and constituency-tree encoders with analytic
//! gradients.
//!
//! Every encoder maps its input to a vector of the shared dimension `dim`:
//!
//! * semantic: mean of token embeddings, linearly projected (or a frozen
//!   vector supplied from file),
//! * POS: a single-layer LSTM over tag embeddings, final hidden state
//!   projected,
//! * tree: two graph-convolution layers over the normalized tree adjacency,
//!   mean-pooled over nodes and projected.
//!
//! Gradients flow through a [`Tape`]: forward calls record what backward
//! needs and hand out a [`Handle`]; [`EncoderStack::backward`] accumulates
//! parameter gradients for one recorded output.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{PosTagSequence, TreeGraph, LEAF_LABEL};
use crate::corpus::{AnnotatedExample, EntitySpan, Sentence};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("backward called without a cached forward pass for this handle")]
    NoCachedForward,
    #[error("gradient has length {got}, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("no external vector for sentence {0}")]
    MissingExternalVector(String),
    #[error("external vector for {id} has dimension {got}, expected {expected}")]
    ExternalDim {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("span [{start},{end}) outside sentence of length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("entity representations require the trainable-bag semantic encoder")]
    NoTokenLayer,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// String-to-id table with a reserved unknown entry at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_items<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            items: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for item in items {
            let item = item.into();
            if !v.index.contains_key(&item) {
                v.index.insert(item.clone(), v.items.len());
                v.items.push(item);
            }
        }
        v
    }

    pub fn id(&self, item: &str) -> usize {
        self.index.get(item).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.items[1..].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let items = Vec::<String>::deserialize(d)?;
        Ok(Vocab::from_items(items))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub tokens: Vocab,
    pub pos: Vocab,
    /// Syntactic categories plus leaf labels.
    pub tree: Vocab,
}

impl Vocabs {
    /// Collects vocabularies in first-seen order, so the result is a pure
    /// function of example order.
    pub fn build(examples: &[AnnotatedExample]) -> Self {
        let tokens = examples
            .iter()
            .flat_map(|e| e.sentence.tokens.iter().cloned());
        let pos: Vec<String> = examples
            .iter()
            .filter_map(|e| e.boundary.as_ref())
            .flat_map(|b| b.pos.tags.iter().cloned())
            .collect();
        let mut tree_labels = vec![LEAF_LABEL.to_string()];
        for b in examples.iter().filter_map(|e| e.boundary.as_ref()) {
            tree_labels.extend(
                b.tree
                    .nodes()
                    .iter()
                    .filter(|n| !n.is_leaf())
                    .map(|n| n.label.clone()),
            );
        }
        tree_labels.extend(pos.iter().cloned());
        Vocabs {
            tokens: Vocab::from_items(tokens),
            pos: Vocab::from_items(pos),
            tree: Vocab::from_items(tree_labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Shared output dimension of all three encoders.
    pub dim: usize,
    pub token_dim: usize,
    pub pos_dim: usize,
    pub lstm_hidden: usize,
    pub tree_dim: usize,
    pub tree_hidden: usize,
    pub gcn_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            token_dim: 64,
            pos_dim: 16,
            lstm_hidden: 32,
            tree_dim: 16,
            tree_hidden: 32,
            gcn_layers: 2,
        }
    }
}

/// Every trainable tensor of the stack. Biases are stored as `1 x n` rows so
/// all tensors share one type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub sem_proj: Array2<f64>,
    pub pos_emb: Array2<f64>,
    /// Gate weights, rows grouped as input, forget, cell, output.
    pub lstm_w: Array2<f64>,
    pub lstm_b: Array2<f64>,
    pub pos_proj: Array2<f64>,
    pub tree_emb: Array2<f64>,
    pub gcn_w: Vec<Array2<f64>>,
    pub tree_proj: Array2<f64>,
}

impl Params {
    fn zeros(cfg: &EncoderConfig, vocabs: &Vocabs) -> Self {
        let h = cfg.lstm_hidden;
        let mut gcn_w = Vec::with_capacity(cfg.gcn_layers);
        for l in 0..cfg.gcn_layers {
            let fan_in = if l == 0 {
                cfg.tree_dim
            } else {
                cfg.tree_hidden
            };
            gcn_w.push(Array2::zeros((fan_in, cfg.tree_hidden)));
        }
        Params {
            tok_emb: Array2::zeros((vocabs.tokens.len(), cfg.token_dim)),
            sem_proj: Array2::zeros((cfg.dim, cfg.token_dim)),
            pos_emb: Array2::zeros((vocabs.pos.len(), cfg.pos_dim)),
            lstm_w: Array2::zeros((4 * h, cfg.pos_dim + h)),
            lstm_b: Array2::zeros((1, 4 * h)),
            pos_proj: Array2::zeros((cfg.dim, h)),
            tree_emb: Array2::zeros((vocabs.tree.len(), cfg.tree_dim)),
            gcn_w,
            tree_proj: Array2::zeros((cfg.dim, cfg.tree_hidden)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Params {
            tok_emb: z(&self.tok_emb),
            sem_proj: z(&self.sem_proj),
            pos_emb: z(&self.pos_emb),
            lstm_w: z(&self.lstm_w),
            lstm_b: z(&self.lstm_b),
            pos_proj: z(&self.pos_proj),
            tree_emb: z(&self.tree_emb),
            gcn_w: self.gcn_w.iter().map(z).collect(),
            tree_proj: z(&self.tree_proj),
        }
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("sem_proj".to_string(), &self.sem_proj),
            ("pos_emb".to_string(), &self.pos_emb),
            ("lstm_w".to_string(), &self.lstm_w),
            ("lstm_b".to_string(), &self.lstm_b),
            ("pos_proj".to_string(), &self.pos_proj),
            ("tree_emb".to_string(), &self.tree_emb),
        ];
        for (l, w) in self.gcn_w.iter().enumerate() {
            out.push((format!("gcn_w{l}"), w));
        }
        out.push(("tree_proj".to_string(), &self.tree_proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("sem_proj".to_string(), &mut self.sem_proj),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("lstm_w".to_string(), &mut self.lstm_w),
            ("lstm_b".to_string(), &mut self.lstm_b),
            ("pos_proj".to_string(), &mut self.pos_proj),
            ("tree_emb".to_string(), &mut self.tree_emb),
        ];
        for (l, w) in self.gcn_w.iter_mut().enumerate() {
            out.push((format!("gcn_w{l}"), w));
        }
        out.push(("tree_proj".to_string(), &mut self.tree_proj));
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum SemanticMode {
    /// Mean of learned token embeddings, linearly projected.
    #[default]
    TrainableBag,
    /// Precomputed, frozen sentence vectors keyed by sentence id.
    External(HashMap<String, Array1<f64>>),
}

impl SemanticMode {
    pub fn is_trainable(&self) -> bool {
        matches!(self, SemanticMode::TrainableBag)
    }
}

/// Reads external sentence vectors from JSONL `{"id": str, "vector": [float]}`.
pub fn load_external_vectors(
    path: impl AsRef<Path>,
    dim: usize,
) -> Result<HashMap<String, Array1<f64>>, EncoderError> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        vector: Vec<f64>,
    }
    let path = path.as_ref();
    let io = |source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)
            .map_err(|e| EncoderError::Checkpoint(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if row.vector.len() != dim {
            return Err(EncoderError::ExternalDim {
                id: row.id,
                expected: dim,
                got: row.vector.len(),
            });
        }
        out.insert(row.id, Array1::from(row.vector));
    }
    Ok(out)
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Records forward passes for a later backward.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    entries: Vec<Cached>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, c: Cached) -> Handle {
        self.entries.push(c);
        Handle {
            tape: self.id,
            index: self.entries.len() - 1,
        }
    }
}

/// Refers to one recorded forward pass on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handle {
    tape: u64,
    index: usize,
}

impl Handle {
    /// A handle that belongs to no tape; backward on it always fails.
    pub fn detached() -> Self {
        Handle { tape: 0, index: 0 }
    }
}

#[derive(Debug)]
enum Cached {
    Bag(BagCache),
    Frozen,
    Lstm(LstmCache),
    Gcn(GcnCache),
}

#[derive(Debug)]
struct BagCache {
    ids: Vec<usize>,
    mean: Array1<f64>,
}

#[derive(Debug)]
struct LstmStep {
    id: usize,
    input: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c_prev: Array1<f64>,
    tanh_c: Array1<f64>,
}

#[derive(Debug)]
struct LstmCache {
    steps: Vec<LstmStep>,
    h_last: Array1<f64>,
}

#[derive(Debug)]
struct GcnCache {
    ids: Vec<usize>,
    adjacency: Array2<f64>,
    /// Node states before each layer and after the last one.
    states: Vec<Array2<f64>>,
    pooled: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `m += a ⊗ b`.
fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// The three encoders with their vocabularies and parameters.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub vocabs: Vocabs,
    pub params: Params,
    pub semantic: SemanticMode,
}

impl EncoderStack {
    /// Xavier-uniform initialization from `seed`. Embedding tables use the
    /// embedding width as both fans.
    pub fn new(config: EncoderConfig, vocabs: Vocabs, seed: u64) -> Self {
        let mut params = Params::zeros(&config, &vocabs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.named_mut() {
            if name == "lstm_b" {
                continue;
            }
            let (rows, cols) = t.dim();
            let limit = if name.ends_with("_emb") {
                (3.0 / cols as f64).sqrt()
            } else if name == "lstm_w" {
                (6.0 / (rows / 4 + cols) as f64).sqrt()
            } else {
                (6.0 / (rows + cols) as f64).sqrt()
            };
            t.mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        EncoderStack {
            config,
            vocabs,
            params,
            semantic: SemanticMode::TrainableBag,
        }
    }

    pub fn with_semantic_mode(mut self, mode: SemanticMode) -> Self {
        self.semantic = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    // ---- semantic -------------------------------------------------------

    fn bag(&self, ids: Vec<usize>, tape: Option<&mut Tape>) -> (Array1<f64>, Option<Handle>) {
        let mut mean = Array1::<f64>::zeros(self.config.token_dim);
        for &id in &ids {
            mean += &self.params.tok_emb.row(id);
        }
        mean /= ids.len() as f64;
        let out = self.params.sem_proj.dot(&mean);
        let handle = tape.map(|t| t.push(Cached::Bag(BagCache { ids, mean })));
        (out, handle)
    }

    fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocabs.tokens.id(t)).collect()
    }

    fn semantic_impl(
        &self,
        sentence: &Sentence,
        tape: Option<&mut Tape>,
    ) -> Result<(Array1<f64>, Option<Handle>), EncoderError> {
        match &self.semantic {
            SemanticMode::TrainableBag => {
                if sentence.tokens.is_empty() {
                    return Err(EncoderError::EmptyInput("sentence"));
                }
                Ok(self.bag(self.token_ids(&sentence.tokens), tape))
            }
            SemanticMode::External(vectors) => {
                let v = vectors
                    .get(&sentence.id)
                    .ok_or_else(|| EncoderError::MissingExternalVector(sentence.id.clone()))?;
                Ok((v.clone(), tape.map(|t| t.push(Cached::Frozen))))
            }
        }
    }

    pub fn encode_semantic(&self, sentence: &Sentence) -> Result<Array1<f64>, EncoderError> {
        self.semantic_impl(sentence, None).map(|(v, _)| v)
    }

    pub fn forward_semantic(
        &self,
        sentence: &Sentence,
        tape: &mut Tape,
    ) -> Result<(Array1<f64>, Handle), EncoderError> {
        let (v, h) = self.semantic_impl(sentence, Some(tape))?;
        Ok((v, h.expect("tape given")))
    }

    /// Projected token vectors, one row per token.
    pub fn token_vectors(&self, sentence: &Sentence) -> Result<Array2<f64>, EncoderError> {
        if !self.semantic.is_trainable() {
            return Err(EncoderError::NoTokenLayer);
        }
        let mut out = Array2::zeros((sentence.len(), self.config.dim));
        for (mut row, id) in out
            .rows_mut()
            .into_iter()
            .zip(self.token_ids(&sentence.tokens))
        {
            row.assign(&self.params.sem_proj.dot(&self.params.tok_emb.row(id)));
        }
        Ok(out)
    }

    fn entity_ids(
        &self,
        sentence: &Sentence,
        span: &EntitySpan,
    ) -> Result<Vec<usize>, EncoderError> {
        if !self.semantic.is_trainable() {
            return Err(EncoderError::NoTokenLayer);
        }
        if span.start >= span.end || span.end > sentence.len() {
            return Err(EncoderError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: sentence.len(),
            });
        }
        Ok(self.token_ids(&sentence.tokens[span.start..span.end]))
    }

    /// Entity representation: the mean of its tokens' projected vectors.
    pub fn encode_entity(
        &self,
        sentence: &Sentence,
        span: &EntitySpan,
    ) -> Result<Array1<f64>, EncoderError> {
        Ok(self.bag(self.entity_ids(sentence, span)?, None).0)
    }

    pub fn forward_entity(
        &self,
        sentence: &Sentence,
        span: &EntitySpan,
        tape: &mut Tape,
    ) -> Result<(Array1<f64>, Handle), EncoderError> {
        let (v, h) = self.bag(self.entity_ids(sentence, span)?, Some(tape));
        Ok((v, h.expect("tape given")))
    }

    // ---- POS LSTM -------------------------------------------------------

    fn lstm(
        &self,
        pos: &PosTagSequence,
        tape: Option<&mut Tape>,
    ) -> Result<(Array1<f64>, Option<Handle>), EncoderError> {
        if pos.tags.is_empty() {
            return Err(EncoderError::EmptyInput("POS sequence"));
        }
        let hsz = self.config.lstm_hidden;
        let p = &self.params;
        let mut h = Array1::<f64>::zeros(hsz);
        let mut c = Array1::<f64>::zeros(hsz);
        let mut steps = Vec::with_capacity(pos.tags.len());
        let bias = p.lstm_b.row(0);
        for tag in &pos.tags {
            let id = self.vocabs.pos.id(tag);
            let mut input = Array1::zeros(self.config.pos_dim + hsz);
            input
                .slice_mut(s![..self.config.pos_dim])
                .assign(&p.pos_emb.row(id));
            input.slice_mut(s![self.config.pos_dim..]).assign(&h);
            let z = p.lstm_w.dot(&input) + bias;
            let i = z.slice(s![0..hsz]).mapv(sigmoid);
            let f = z.slice(s![hsz..2 * hsz]).mapv(sigmoid);
            let g = z.slice(s![2 * hsz..3 * hsz]).mapv(f64::tanh);
            let o = z.slice(s![3 * hsz..]).mapv(sigmoid);
            let c_prev = c;
            c = &f * &c_prev + &i * &g;
            let tanh_c = c.mapv(f64::tanh);
            h = &o * &tanh_c;
            if tape.is_some() {
                steps.push(LstmStep {
                    id,
                    input,
                    i,
                    f,
                    g,
                    o,
                    c_prev,
                    tanh_c,
                });
            }
        }
        let out = p.pos_proj.dot(&h);
        let handle = tape.map(|t| t.push(Cached::Lstm(LstmCache { steps, h_last: h })));
        Ok((out, handle))
    }

    pub fn encode_pos(&self, pos: &PosTagSequence) -> Result<Array1<f64>, EncoderError> {
        self.lstm(pos, None).map(|(v, _)| v)
    }

    pub fn forward_pos(
        &self,
        pos: &PosTagSequence,
        tape: &mut Tape,
    ) -> Result<(Array1<f64>, Handle), EncoderError> {
        let (v, h) = self.lstm(pos, Some(tape))?;
        Ok((v, h.expect("tape given")))
    }

    // ---- tree GCN -------------------------------------------------------

    fn gcn(
        &self,
        graph: &TreeGraph,
        tape: Option<&mut Tape>,
    ) -> Result<(Array1<f64>, Option<Handle>), EncoderError> {
        let n = graph.num_nodes();
        if n == 0 {
            return Err(EncoderError::EmptyInput("tree graph"));
        }
        let ids: Vec<usize> = graph
            .labels
            .iter()
            .map(|l| self.vocabs.tree.id(l))
            .collect();
        let mut h = Array2::zeros((n, self.config.tree_dim));
        for (mut row, &id) in h.rows_mut().into_iter().zip(&ids) {
            row.assign(&self.params.tree_emb.row(id));
        }
        let mut states = Vec::with_capacity(self.params.gcn_w.len() + 1);
        for w in &self.params.gcn_w {
            let next = graph.adjacency.dot(&h).dot(w).mapv(f64::tanh);
            states.push(h);
            h = next;
        }
        let pooled = h.mean_axis(Axis(0)).expect("n > 0");
        let out = self.params.tree_proj.dot(&pooled);
        states.push(h);
        let handle = tape.map(|t| {
            t.push(Cached::Gcn(GcnCache {
                ids,
                adjacency: graph.adjacency.clone(),
                states,
                pooled,
            }))
        });
        Ok((out, handle))
    }

    pub fn encode_tree(&self, graph: &TreeGraph) -> Result<Array1<f64>, EncoderError> {
        self.gcn(graph, None).map(|(v, _)| v)
    }

    pub fn forward_tree(
        &self,
        graph: &TreeGraph,
        tape: &mut Tape,
    ) -> Result<(Array1<f64>, Handle), EncoderError> {
        let (v, h) = self.gcn(graph, Some(tape))?;
        Ok((v, h.expect("tape given")))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates into `grads` the gradient of `grad_out · output` with
    /// respect to every parameter, for the forward pass behind `handle`.
    pub fn backward(
        &self,
        tape: &Tape,
        handle: Handle,
        grad_out: ArrayView1<f64>,
        grads: &mut Params,
    ) -> Result<(), EncoderError> {
        if handle.tape != tape.id {
            return Err(EncoderError::NoCachedForward);
        }
        let cached = tape
            .entries
            .get(handle.index)
            .ok_or(EncoderError::NoCachedForward)?;
        if grad_out.len() != self.config.dim && !matches!(cached, Cached::Frozen) {
            return Err(EncoderError::GradientShape {
                expected: self.config.dim,
                got: grad_out.len(),
            });
        }
        let p = &self.params;
        match cached {
            Cached::Frozen => {}
            Cached::Bag(c) => {
                add_outer(&mut grads.sem_proj, grad_out, c.mean.view());
                let d_mean = p.sem_proj.t().dot(&grad_out) / c.ids.len() as f64;
                for &id in &c.ids {
                    grads.tok_emb.row_mut(id).scaled_add(1.0, &d_mean);
                }
            }
            Cached::Lstm(c) => {
                let hsz = self.config.lstm_hidden;
                let edim = self.config.pos_dim;
                add_outer(&mut grads.pos_proj, grad_out, c.h_last.view());
                let mut dh = p.pos_proj.t().dot(&grad_out);
                let mut dc = Array1::<f64>::zeros(hsz);
                let mut dz = Array1::<f64>::zeros(4 * hsz);
                for st in c.steps.iter().rev() {
                    let d_o = &dh * &st.tanh_c;
                    let dct = &dc + &(&dh * &st.o * &st.tanh_c.mapv(|t| 1.0 - t * t));
                    let d_i = &dct * &st.g;
                    let d_g = &dct * &st.i;
                    let d_f = &dct * &st.c_prev;
                    dc = &dct * &st.f;
                    dz.slice_mut(s![0..hsz])
                        .assign(&(&d_i * &st.i.mapv(|v| v * (1.0 - v))));
                    dz.slice_mut(s![hsz..2 * hsz])
                        .assign(&(&d_f * &st.f.mapv(|v| v * (1.0 - v))));
                    dz.slice_mut(s![2 * hsz..3 * hsz])
                        .assign(&(&d_g * &st.g.mapv(|v| 1.0 - v * v)));
                    dz.slice_mut(s![3 * hsz..])
                        .assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));
                    add_outer(&mut grads.lstm_w, dz.view(), st.input.view());
                    grads.lstm_b.row_mut(0).scaled_add(1.0, &dz);
                    let d_input = p.lstm_w.t().dot(&dz);
                    grads
                        .pos_emb
                        .row_mut(st.id)
                        .scaled_add(1.0, &d_input.slice(s![..edim]));
                    dh = d_input.slice(s![edim..]).to_owned();
                }
            }
            Cached::Gcn(c) => {
                let n = c.ids.len();
                add_outer(&mut grads.tree_proj, grad_out, c.pooled.view());
                let d_pooled = p.tree_proj.t().dot(&grad_out) / n as f64;
                let mut d_h = Array2::<f64>::zeros((n, d_pooled.len()));
                for mut row in d_h.rows_mut() {
                    row.assign(&d_pooled);
                }
                for (l, w) in p.gcn_w.iter().enumerate().rev() {
                    let out = &c.states[l + 1];
                    let d_z = &d_h * &out.mapv(|v| 1.0 - v * v);
                    let ah = c.adjacency.dot(&c.states[l]);
                    grads.gcn_w[l] += &ah.t().dot(&d_z);
                    // adjacency is symmetric
                    d_h = c.adjacency.t().dot(&d_z.dot(&w.t()));
                }
                for (row, &id) in d_h.rows().into_iter().zip(&c.ids) {
                    grads.tree_emb.row_mut(id).scaled_add(1.0, &row);
                }
            }
        }
        Ok(())
    }

    // ---- checkpoints ----------------------------------------------------

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config,
            semantic_mode: match self.semantic {
                SemanticMode::TrainableBag => "trainable-bag".into(),
                SemanticMode::External(_) => "external-provider".into(),
            },
            vocabs: self.vocabs.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: vec![t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        let io = |source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer(&mut w, &ckpt)
            .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    }

    /// Loads a checkpoint. A stack saved in external-provider mode comes back
    /// in that mode with no vectors attached; supply them with
    /// [`EncoderStack::with_semantic_mode`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(EncoderError::Checkpoint(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        let mut params = Params::zeros(&ckpt.config, &ckpt.vocabs);
        let mut by_name: HashMap<String, NamedTensor> = ckpt
            .tensors
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        for (name, t) in params.named_mut() {
            let stored = by_name
                .remove(&name)
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing tensor {name}")))?;
            let expected = vec![t.nrows(), t.ncols()];
            if stored.shape != expected || stored.data.len() != t.len() {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {expected:?}",
                    stored.shape
                )));
            }
            for (dst, src) in t.iter_mut().zip(stored.data) {
                *dst = src;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(EncoderError::Checkpoint(format!(
                "unexpected tensor {extra}"
            )));
        }
        let semantic = match ckpt.semantic_mode.as_str() {
            "trainable-bag" => SemanticMode::TrainableBag,
            "external-provider" => SemanticMode::External(HashMap::new()),
            other => {
                return Err(EncoderError::Checkpoint(format!(
                    "unknown semantic mode {other}"
                )))
            }
        };
        Ok(EncoderStack {
            config: ckpt.config,
            vocabs: ckpt.vocabs,
            params,
            semantic,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: EncoderConfig,
    semantic_mode: String,
    vocabs: Vocabs,
    tensors: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{parse_bracketed_tree, tree_to_graph};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            dim: 5,
            token_dim: 4,
            pos_dim: 3,
            lstm_hidden: 4,
            tree_dim: 3,
            tree_hidden: 4,
            gcn_layers: 2,
        }
    }

    fn stack(seed: u64) -> EncoderStack {
        let vocabs = Vocabs {
            tokens: Vocab::from_items(toks("the dog barks a cat runs")),
            pos: Vocab::from_items(toks("DT NN VBZ")),
            tree: Vocab::from_items(toks("<leaf> S NP VP DT NN VBZ")),
        };
        EncoderStack::new(small_cfg(), vocabs, seed)
    }

    fn sent(id: &str, s: &str) -> Sentence {
        Sentence::new(id, toks(s)).unwrap()
    }

    fn pos(s: &str) -> PosTagSequence {
        PosTagSequence { tags: toks(s) }
    }

    #[test]
    fn semantic_identical_and_single_token() {
        let st = stack(1);
        let a = st.encode_semantic(&sent("a", "the dog barks")).unwrap();
        let b = st.encode_semantic(&sent("b", "the dog barks")).unwrap();
        assert_eq!(a, b);
        let one = st.encode_semantic(&sent("c", "dog")).unwrap();
        let expected = st
            .params
            .sem_proj
            .dot(&st.params.tok_emb.row(st.vocabs.tokens.id("dog")));
        assert_eq!(one, expected);
    }

    #[test]
    fn semantic_bag_order_invariant() {
        let st = stack(2);
        let a = st.encode_semantic(&sent("a", "the dog barks")).unwrap();
        for perm in ["dog the barks", "barks dog the", "the barks dog"] {
            let b = st.encode_semantic(&sent("b", perm)).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_tokens_use_unk_row() {
        let st = stack(3);
        let a = st.encode_semantic(&sent("a", "zebra")).unwrap();
        let b = st.encode_semantic(&sent("b", "quagga")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, st.params.sem_proj.dot(&st.params.tok_emb.row(0)));
    }

    #[test]
    fn lstm_single_step_base_case() {
        let st = stack(4);
        let p = &st.params;
        let h = st.config.lstm_hidden;
        let x = p.pos_emb.row(st.vocabs.pos.id("NN"));
        // zero initial state: only the input half of the gate matrix matters
        let z = p.lstm_w.slice(s![.., ..st.config.pos_dim]).dot(&x) + p.lstm_b.row(0);
        let i = z.slice(s![0..h]).mapv(sigmoid);
        let g = z.slice(s![2 * h..3 * h]).mapv(f64::tanh);
        let o = z.slice(s![3 * h..]).mapv(sigmoid);
        let hidden = &o * &(&i * &g).mapv(f64::tanh);
        let expected = p.pos_proj.dot(&hidden);
        let got = st.encode_pos(&pos("NN")).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_order_sensitive() {
        let st = stack(5);
        let a = st.encode_pos(&pos("DT NN")).unwrap();
        let b = st.encode_pos(&pos("NN DT")).unwrap();
        let diff: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "max diff {diff}");
        assert_eq!(a, st.encode_pos(&pos("DT NN")).unwrap());
    }

    #[test]
    fn gcn_permutation_invariant() {
        let st = stack(6);
        let t = parse_bracketed_tree(
            "(S (NP (DT the) (NN dog)) (VP (VBZ barks)))",
            &toks("the dog barks"),
        )
        .unwrap();
        let g = tree_to_graph(&t, Some(&pos("DT NN VBZ")));
        let base = st.encode_tree(&g).unwrap();
        let n = g.num_nodes();
        for shift in 1..n {
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let other = st.encode_tree(&g.permuted(&perm)).unwrap();
            for (a, b) in base.iter().zip(other.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gcn_zero_embeddings_give_zero() {
        let mut st = stack(7);
        st.params.tree_emb.fill(0.0);
        let t = parse_bracketed_tree("(S (NP dog) (VP barks))", &toks("dog barks")).unwrap();
        let out = st.encode_tree(&tree_to_graph(&t, None)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_one_node_closed_form() {
        let st = stack(8);
        let g = TreeGraph {
            adjacency: Array2::from_elem((1, 1), 1.0),
            labels: vec!["NP".into()],
        };
        let p = &st.params;
        let e = p.tree_emb.row(st.vocabs.tree.id("NP"));
        let h1 = p.gcn_w[0].t().dot(&e).mapv(f64::tanh);
        let h2 = p.gcn_w[1].t().dot(&h1).mapv(f64::tanh);
        let expected = p.tree_proj.dot(&h2);
        let got = st.encode_tree(&g).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        assert_eq!(stack(9).params, stack(9).params);
        assert_ne!(stack(9).params, stack(10).params);
    }

    #[test]
    fn backward_requires_tape_entry() {
        let st = stack(11);
        let mut grads = st.params.zeros_like();
        let tape = Tape::new();
        let g = Array1::<f64>::ones(st.dim());
        let err = st
            .backward(&tape, Handle::detached(), g.view(), &mut grads)
            .unwrap_err();
        assert!(matches!(err, EncoderError::NoCachedForward));

        // a handle from another tape is rejected too
        let mut other = Tape::new();
        let (_, h) = st.forward_semantic(&sent("a", "dog"), &mut other).unwrap();
        assert!(st.backward(&tape, h, g.view(), &mut grads).is_err());
        assert!(st.backward(&other, h, g.view(), &mut grads).is_ok());
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let st = stack(12);
        let mut tape = Tape::new();
        let t = parse_bracketed_tree("(S (NP dog) (VP barks))", &toks("dog barks")).unwrap();
        let handles = [
            st.forward_semantic(&sent("a", "dog barks"), &mut tape)
                .unwrap()
                .1,
            st.forward_pos(&pos("NN VBZ"), &mut tape).unwrap().1,
            st.forward_tree(&tree_to_graph(&t, None), &mut tape)
                .unwrap()
                .1,
        ];
        let mut grads = st.params.zeros_like();
        let zero = Array1::<f64>::zeros(st.dim());
        for h in handles {
            st.backward(&tape, h, zero.view(), &mut grads).unwrap();
        }
        assert!(grads
            .named()
            .iter()
            .all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unused_token_row_gets_no_gradient() {
        let st = stack(13);
        let mut tape = Tape::new();
        let (_, h) = st
            .forward_semantic(&sent("a", "the dog"), &mut tape)
            .unwrap();
        let mut grads = st.params.zeros_like();
        st.backward(&tape, h, Array1::ones(st.dim()).view(), &mut grads)
            .unwrap();
        let cat = st.vocabs.tokens.id("cat");
        assert!(grads.tok_emb.row(cat).iter().all(|&v| v == 0.0));
        assert!(grads
            .tok_emb
            .row(st.vocabs.tokens.id("dog"))
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn single_parameter_central_difference() {
        // d/dθ of (1,...,1)·encode_semantic("dog") for one projection entry.
        let st = stack(14);
        let s = sent("a", "dog");
        let mut tape = Tape::new();
        let (_, h) = st.forward_semantic(&s, &mut tape).unwrap();
        let mut grads = st.params.zeros_like();
        st.backward(&tape, h, Array1::ones(st.dim()).view(), &mut grads)
            .unwrap();
        let eps = 1e-5;
        let eval = |delta: f64| {
            let mut p = st.clone();
            p.params.sem_proj[[2, 1]] += delta;
            p.encode_semantic(&s).unwrap().sum()
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let analytic = grads.sem_proj[[2, 1]];
        assert!(
            (numeric - analytic).abs() <= 1e-4 * analytic.abs().max(1e-8),
            "{numeric} vs {analytic}"
        );
    }

    #[test]
    fn external_mode_lookup() {
        let vectors =
            HashMap::from([("a".to_string(), Array1::from(vec![1.0, 0.0, 0.0, 0.0, 0.0]))]);
        let st = stack(15).with_semantic_mode(SemanticMode::External(vectors));
        assert_eq!(st.encode_semantic(&sent("a", "whatever")).unwrap()[0], 1.0);
        assert!(matches!(
            st.encode_semantic(&sent("b", "dog")),
            Err(EncoderError::MissingExternalVector(_))
        ));
        assert!(matches!(
            st.token_vectors(&sent("a", "dog")),
            Err(EncoderError::NoTokenLayer)
        ));
    }

    #[test]
    fn entity_vector_is_mean_of_token_vectors() {
        let st = stack(16);
        let s = sent("a", "the dog barks");
        let tv = st.token_vectors(&s).unwrap();
        let e = st.encode_entity(&s, &EntitySpan::new(0, 2, "X")).unwrap();
        let mean = tv.slice(s![0..2, ..]).mean_axis(Axis(0)).unwrap();
        for (a, b) in e.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let st = stack(17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        st.save(&path).unwrap();
        let back = EncoderStack::load(&path).unwrap();
        assert_eq!(back.params, st.params);
        assert_eq!(back.vocabs, st.vocabs);
        assert_eq!(back.config, st.config);
    }

    #[test]
    fn vocab_build_is_ordered() {
        let ex = AnnotatedExample::new(sent("a", "b a b"), vec![], None).unwrap();
        let v = Vocabs::build(&[ex]);
        assert_eq!(v.tokens.items(), ["<unk>", "b", "a"]);
    }
}
