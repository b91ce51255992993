//! Experiment commands behind the `icl-ner` binary.
//!
//! Every command returns a [`CliError`] carrying its exit code: 1 for domain
//! errors (invalid data, divergence, failed runs), 2 for usage errors
//! (missing files, bad flags or config).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::ExternalAnnotator;
use crate::corpus::{
    gold_spans, load_dataset, nesting_stats, sample_k_shot, AnnotatedExample, Dataset, EntitySpan,
    KShotConfig,
};
use crate::encoders::{load_external_vectors, EncoderConfig, EncoderStack, SemanticMode, Vocabs};
use crate::eval::{aggregate, render_summary, score, table, EvalReport, RunSummary, SpanSets};
use crate::lmclient::{BackendConfig, GoldLookup, LmClient, LmRequest};
use crate::prompt::{
    parse_lm_output, render_prompt, write_transcript_entry, DemoOrder, Diagnostic, PromptTemplate,
    TranscriptEntry,
};
use crate::retriever::{
    build_index, train, RetrieverError, ScoringWeights, TrainConfig, VectorTriple,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Domain(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Annotation pool that k-shot support sets are drawn from.
    pub train: PathBuf,
    pub test: PathBuf,
    /// Retriever training data; defaults to `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retriever: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// TOML template file; the built-in template when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_pos: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_tree: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_order: Option<DemoOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

fn default_k() -> usize {
    5
}

fn default_m() -> usize {
    5
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Trained encoder; defaults to `<out>/checkpoint.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Frozen sentence vectors (JSONL `{"id", "vector"}`) replacing the
    /// trainable semantic encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_vectors: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub retrieval: ScoringWeights,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Named backends selectable by `sweep --axis backend`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub backends: BTreeMap<String, BackendConfig>,
    /// Command producing POS tags and trees for sentences that lack them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<AnnotatorConfig>,
}

/// Sets `dotted.key` in a TOML table. The value is read as TOML when it
/// parses as such and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config, applies overrides and resolves relative paths
    /// against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.test);
        for p in [
            self.data.retriever.as_mut(),
            self.out.as_mut(),
            self.checkpoint.as_mut(),
            self.external_vectors.as_mut(),
            self.prompt.template.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for b in std::iter::once(&mut self.backend).chain(self.backends.values_mut()) {
            for p in [b.transcript.as_mut(), b.cache_dir.as_mut()]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that referenced input files exist and settings are usable.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        if self.k == 0 || self.m == 0 {
            return Err(CliError::Usage("k and m must be at least 1".into()));
        }
        let inputs = [
            Some(&self.data.train),
            Some(&self.data.test),
            self.data.retriever.as_ref(),
        ]
        .into_iter()
        .chain([
            self.external_vectors.as_ref(),
            self.prompt.template.as_ref(),
        ])
        .chain(
            std::iter::once(&self.backend)
                .chain(self.backends.values())
                .map(|b| b.transcript.as_ref()),
        )
        .flatten();
        for p in inputs {
            if !p.exists() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        self.retrieval
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.out
            .clone()
            .ok_or_else(|| CliError::Usage("no output directory: set `out` or pass --out".into()))
    }

    fn checkpoint_path(&self) -> Result<PathBuf, CliError> {
        match &self.checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join(CHECKPOINT_FILE)),
        }
    }

    fn template(&self) -> Result<PromptTemplate, CliError> {
        let mut t = match &self.prompt.template {
            Some(p) => PromptTemplate::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
            None => PromptTemplate::default(),
        };
        if let Some(v) = self.prompt.include_pos {
            t.include_pos = v;
        }
        if let Some(v) = self.prompt.include_tree {
            t.include_tree = v;
        }
        if let Some(v) = self.prompt.demo_order {
            t.demo_order = v;
        }
        Ok(t)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_TRACE_FILE: &str = "loss_trace.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CONFIG_ECHO: &str = "config.toml";
const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Domain(format!(
                    "{} is locked by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(write_err(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} does not exist",
            path.display()
        )));
    }
    load_dataset(path).map_err(domain)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| write_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(domain)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn cmd_validate(data: &Path) -> Result<String, CliError> {
    let d = load_data(data)?;
    Ok(format!(
        "ok: {} sentences, {} labels, {} entities",
        d.examples.len(),
        d.labels.len(),
        d.examples.iter().map(|e| e.entities.len()).sum::<usize>()
    ))
}

#[derive(Debug, Serialize)]
pub struct DatasetStats {
    pub labels: Vec<String>,
    pub label_counts: BTreeMap<String, usize>,
    pub with_boundary: usize,
    #[serde(flatten)]
    pub nesting: crate::corpus::NestingStats,
}

pub fn cmd_stats(data: &Path) -> Result<String, CliError> {
    let d = load_data(data)?;
    let mut label_counts: BTreeMap<String, usize> =
        d.labels.iter().map(|l| (l.to_string(), 0)).collect();
    for e in d.examples.iter().flat_map(|e| &e.entities) {
        *label_counts.entry(e.label.clone()).or_default() += 1;
    }
    let stats = DatasetStats {
        labels: d.labels.as_slice().to_vec(),
        label_counts,
        with_boundary: d.examples.iter().filter(|e| e.boundary.is_some()).count(),
        nesting: nesting_stats(&d.examples),
    };
    serde_json::to_string_pretty(&stats).map_err(domain)
}

fn annotate(cfg: &ExperimentConfig, examples: &mut [AnnotatedExample]) -> Result<(), CliError> {
    let missing = examples.iter().filter(|e| e.boundary.is_none()).count();
    if missing == 0 {
        return Ok(());
    }
    let Some(a) = &cfg.annotator else {
        return Err(CliError::Domain(format!(
            "{missing} sentence(s) lack POS tags and a tree and no annotator is configured"
        )));
    };
    ExternalAnnotator::new(a.program.clone(), a.args.clone())
        .annotate_missing(examples)
        .map_err(domain)?;
    Ok(())
}

fn external_mode(cfg: &ExperimentConfig) -> Result<Option<SemanticMode>, CliError> {
    cfg.external_vectors
        .as_ref()
        .map(|p| {
            load_external_vectors(p, cfg.encoder.dim)
                .map(SemanticMode::External)
                .map_err(domain)
        })
        .transpose()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub final_loss: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let _lock = OutputLock::acquire(&out)?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_toml())?;

    let mut pool = load_data(cfg.data.retriever.as_ref().unwrap_or(&cfg.data.train))?.examples;
    annotate(cfg, &mut pool)?;
    let mut stack = EncoderStack::new(cfg.encoder, Vocabs::build(&pool), cfg.training.seed);
    if let Some(mode) = external_mode(cfg)? {
        stack = stack.with_semantic_mode(mode);
    }
    let (trained, trace) = train(&pool, stack, &cfg.training).map_err(|e| match e {
        RetrieverError::Diverged { .. } => {
            CliError::Domain(format!("{e}; try a lower learning rate"))
        }
        e => domain(e),
    })?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    trained.save(&checkpoint).map_err(domain)?;
    let loss_trace = out.join(LOSS_TRACE_FILE);
    let mut w = BufWriter::new(File::create(&loss_trace).map_err(|e| write_err(&loss_trace, e))?);
    for r in &trace {
        serde_json::to_writer(&mut w, r).map_err(domain)?;
        w.write_all(b"\n").map_err(|e| write_err(&loss_trace, e))?;
    }
    w.flush().map_err(|e| write_err(&loss_trace, e))?;
    let final_loss = trace.last().map_or(0.0, |r| r.total);
    info!(
        "trained {} epoch(s), final loss {final_loss:.6}",
        trace.len()
    );
    Ok(TrainOutcome {
        checkpoint,
        loss_trace,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub seed: u64,
    pub id: String,
    pub entities: Vec<EntitySpan>,
    pub demos: Vec<String>,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: Vec<u64>,
    pub k: usize,
    pub m: usize,
    pub backend: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub report: RunReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Runs every seed: sample a support set, index it, retrieve and render
/// demonstrations per test sentence, complete, parse and score.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let checkpoint = cfg.checkpoint_path()?;
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "no trained checkpoint at {} (run `train` first or set `checkpoint`)",
            checkpoint.display()
        )));
    }
    let _lock = OutputLock::acquire(&out)?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_toml())?;

    let pool = load_data(&cfg.data.train)?;
    let mut test = load_data(&cfg.data.test)?.examples;
    let mut pool_examples = pool.examples;
    annotate(cfg, &mut pool_examples)?;
    annotate(cfg, &mut test)?;
    let labels = pool.labels;

    let mut stack = EncoderStack::load(&checkpoint).map_err(domain)?;
    if let Some(mode) = external_mode(cfg)? {
        stack = stack.with_semantic_mode(mode);
    }
    let template = cfg.template()?;
    let mut backend = cfg.backend.clone();
    if backend.cache_dir.is_none() {
        backend.cache_dir = Some(out.join("cache"));
    }
    let client = LmClient::new(backend, Some(GoldLookup::from_examples(&test)))
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let queries = test
        .iter()
        .map(|e| VectorTriple::encode(&stack, &e.sentence, e.boundary.as_ref().expect("annotated")))
        .collect::<Result<Vec<_>, _>>()
        .map_err(domain)?;
    let gold = gold_spans(&test);

    let transcript_path = out.join(TRANSCRIPT_FILE);
    let mut transcript =
        BufWriter::new(File::create(&transcript_path).map_err(|e| write_err(&transcript_path, e))?);
    let mut predictions = Vec::new();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let support = sample_k_shot(&pool_examples, &labels, KShotConfig { k: cfg.k, seed })
            .map_err(domain)?;
        let index = build_index(&support, &stack, cfg.retrieval).map_err(domain)?;
        let m = cfg.m.min(index.len());
        if m < cfg.m {
            warn!(
                "seed {seed}: support set has {} sentence(s); using m = {m}",
                index.len()
            );
        }
        let by_id: HashMap<&str, &AnnotatedExample> = support.iter().map(|e| (e.id(), e)).collect();

        let mut bundles = Vec::with_capacity(test.len());
        for (ex, q) in test.iter().zip(&queries) {
            let ranked = index.retrieve(q, m).map_err(domain)?;
            let demos: Vec<&AnnotatedExample> =
                ranked.iter().map(|r| by_id[r.id.as_str()]).collect();
            bundles.push(render_prompt(&template, &demos, &labels, &ex.sentence).map_err(domain)?);
        }
        let requests: Vec<LmRequest> = bundles
            .iter()
            .map(|b| LmRequest {
                prompt: b.text.clone(),
                params: cfg.backend.params.clone(),
                sentence_id: Some(b.test_id.clone()),
            })
            .collect();
        let responses = client.complete_batch(&requests);

        let mut pred = SpanSets::new();
        for ((ex, bundle), response) in test.iter().zip(&bundles).zip(responses) {
            let (spans, diagnostics, reply, error) = match response {
                Ok(r) => {
                    let parsed = parse_lm_output(&r.text, &ex.sentence, &labels);
                    (parsed.spans, parsed.diagnostics, Some(r.text), None)
                }
                Err(e) => (BTreeSet::new(), Vec::new(), None, Some(e.to_string())),
            };
            write_transcript_entry(
                &mut transcript,
                &TranscriptEntry {
                    sentence_id: ex.id().to_string(),
                    seed: Some(seed),
                    prompt: bundle.text.clone(),
                    reply,
                    error: error.clone(),
                    diagnostics: diagnostics.clone(),
                },
            )
            .map_err(|e| write_err(&transcript_path, e))?;
            predictions.push(PredictionRecord {
                seed,
                id: ex.id().to_string(),
                entities: spans.iter().cloned().collect(),
                demos: bundle.demo_ids.clone(),
                diagnostics,
                error,
            });
            pred.insert(ex.id().to_string(), spans);
        }
        let report = score(&gold, &pred).map_err(domain)?;
        info!("seed {seed}: F1 {:.4}", report.f1);
        reports.push(report);
    }
    transcript
        .flush()
        .map_err(|e| write_err(&transcript_path, e))?;

    let summary = aggregate(reports).map_err(domain)?;
    let report = RunReport {
        seeds: cfg.seeds.clone(),
        k: cfg.k,
        m: cfg.m,
        backend: cfg.backend.kind.as_str().to_string(),
        summary,
    };
    write_predictions(&out.join(PREDICTIONS_FILE), &predictions)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    let names: Vec<String> = cfg.seeds.iter().map(|s| format!("seed {s}")).collect();
    write_text(
        &out.join(REPORT_TXT),
        &render_summary(&names, &report.summary),
    )?;
    Ok(RunOutcome {
        out,
        report,
        predictions,
    })
}

fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| write_err(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(domain)?;
        w.write_all(b"\n").map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(domain)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Domain(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    M,
    Backend,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "k" => Ok(Self::K),
            "m" => Ok(Self::M),
            "backend" => Ok(Self::Backend),
            _ => Err(format!(
                "unknown sweep axis {s:?} (expected k, m or backend)"
            )),
        }
    }
}

impl SweepAxis {
    fn name(&self) -> &'static str {
        match self {
            Self::K => "k",
            Self::M => "m",
            Self::Backend => "backend",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

/// Runs `cmd_run` once per axis value into `<out>/<axis>=<value>`. Failing
/// cells are recorded and the sweep continues.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepRow>, CliError> {
    let mut seen = HashSet::new();
    if let Some(dup) = values.iter().find(|v| !seen.insert(v.as_str())) {
        return Err(CliError::Usage(format!("duplicate sweep value {dup:?}")));
    }
    if values.is_empty() {
        return Err(CliError::Usage("no sweep values".into()));
    }
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let checkpoint = cfg.checkpoint_path()?;
    let _lock = OutputLock::acquire(&out)?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_toml())?;

    let mut rows = Vec::new();
    for value in values {
        let cell = (|| -> Result<RunSummary, CliError> {
            let mut c = cfg.clone();
            c.checkpoint = Some(checkpoint.clone());
            c.out = Some(out.join(format!("{}={value}", axis.name())));
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("{v:?} is not a count")))
            };
            match axis {
                SweepAxis::K => c.k = parse(value)?,
                SweepAxis::M => c.m = parse(value)?,
                SweepAxis::Backend => {
                    c.backend = cfg.backends.get(value).cloned().ok_or_else(|| {
                        CliError::Usage(format!("no backend named {value:?} in [backends]"))
                    })?
                }
            }
            Ok(cmd_run(&c)?.report.summary)
        })();
        rows.push(match cell {
            Ok(summary) => SweepRow {
                value: value.clone(),
                summary: Some(summary),
                error: None,
            },
            Err(e) => {
                warn!("sweep {}={value} failed: {e}", axis.name());
                SweepRow {
                    value: value.clone(),
                    summary: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    write_json(&out.join("sweep.json"), &rows)?;
    write_text(&out.join("sweep.txt"), &sweep_table(axis, &rows))?;
    Ok(rows)
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| match &r.summary {
            Some(s) => [
                r.value.clone(),
                format!("{:.2}", 100.0 * s.mean_precision),
                format!("{:.2}", 100.0 * s.mean_recall),
                format!("{:.2}", 100.0 * s.mean_f1),
                format!("{:.2}", 100.0 * s.sd_f1),
            ],
            None => [
                r.value.clone(),
                "-".into(),
                "-".into(),
                "-".into(),
                format!("failed: {}", r.error.as_deref().unwrap_or("")),
            ],
        })
        .collect();
    table(&[axis.name(), "P", "R", "F1", "sd"], &cells)
}

/// Scores a predictions file against a gold dataset, one report per seed.
pub fn cmd_score(gold_path: &Path, pred_path: &Path) -> Result<(RunSummary, String), CliError> {
    let gold = gold_spans(&load_data(gold_path)?.examples);
    if !pred_path.exists() {
        return Err(CliError::Usage(format!(
            "{} does not exist",
            pred_path.display()
        )));
    }
    let mut by_seed: BTreeMap<u64, SpanSets> = BTreeMap::new();
    for r in read_predictions(pred_path)? {
        by_seed
            .entry(r.seed)
            .or_default()
            .entry(r.id)
            .or_default()
            .extend(r.entities);
    }
    if by_seed.is_empty() {
        by_seed.insert(0, SpanSets::new());
    }
    let reports: Vec<EvalReport> = by_seed
        .values()
        .map(|p| score(&gold, p))
        .collect::<Result<_, _>>()
        .map_err(domain)?;
    let names: Vec<String> = by_seed.keys().map(|s| format!("seed {s}")).collect();
    let summary = aggregate(reports).map_err(domain)?;
    let text = render_summary(&names, &summary);
    Ok((summary, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> &'static str {
        "k = 2\nseeds = [1, 2]\n[data]\ntrain = \"a.jsonl\"\ntest = \"b.jsonl\"\n"
    }

    #[test]
    fn config_defaults_and_relative_paths() {
        let c = ExperimentConfig::from_toml(base_toml(), &[], Path::new("/base")).unwrap();
        assert_eq!((c.k, c.m), (2, 5));
        assert_eq!(c.seeds, [1, 2]);
        assert_eq!(c.data.train, Path::new("/base/a.jsonl"));
        assert_eq!(c.training, TrainConfig::default());
        assert_eq!(c.prompt, PromptConfig::default());
    }

    #[test]
    fn overrides_set_nested_keys() {
        let o = vec![
            "m=3".to_string(),
            "training.learning_rate=0.5".to_string(),
            "backend.kind=mock-scripted".to_string(),
            "prompt.include_tree=false".to_string(),
            "seeds=[4]".to_string(),
        ];
        let c = ExperimentConfig::from_toml(base_toml(), &o, Path::new("/")).unwrap();
        assert_eq!(c.m, 3);
        assert_eq!(c.training.learning_rate, 0.5);
        assert_eq!(c.backend.kind, crate::lmclient::BackendKind::MockScripted);
        assert_eq!(c.prompt.include_tree, Some(false));
        assert_eq!(c.seeds, [4]);
    }

    #[test]
    fn bad_override_and_unknown_keys_are_usage_errors() {
        let e = ExperimentConfig::from_toml(base_toml(), &["novalue".into()], Path::new("/"))
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_toml(base_toml(), &["colour=1".into()], Path::new("/"))
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_toml(base_toml(), &["k.x=1".into()], Path::new("/"))
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn effective_config_round_trips() {
        let c = ExperimentConfig::from_toml(base_toml(), &["out=\"/o\"".into()], Path::new("/b"))
            .unwrap();
        let again =
            ExperimentConfig::from_toml(&c.to_toml(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn validation_rejects_empty_seeds_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::from_toml(base_toml(), &[], dir.path()).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Usage(m)) if m.contains("a.jsonl")));
        fs::write(dir.path().join("a.jsonl"), "").unwrap();
        fs::write(dir.path().join("b.jsonl"), "").unwrap();
        c.validate().unwrap();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        let e = OutputLock::acquire(dir.path()).err().unwrap();
        assert_eq!(e.exit_code(), 1);
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn sweep_rejects_duplicates_before_running() {
        let c = ExperimentConfig::from_toml(base_toml(), &[], Path::new("/nonexistent")).unwrap();
        let e = cmd_sweep(&c, SweepAxis::K, &["1".into(), "1".into()]).unwrap_err();
        assert!(e.to_string().contains("duplicate"));
        assert_eq!("backend".parse::<SweepAxis>(), Ok(SweepAxis::Backend));
        assert!("x".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn missing_data_file_is_a_usage_error() {
        let e = cmd_validate(Path::new("/definitely/not/here.jsonl")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
