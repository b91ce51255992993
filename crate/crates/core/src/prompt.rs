//! Prompt rendering for in-context NER and parsing of the model's reply.
//!
//! A rendered prompt has four blocks separated by blank lines:
//!
//! ```text
//! <instruction>
//!
//! Sentence: <demo tokens>
//! POS: <tags>            (optional)
//! Tree: <bracketed tree> (optional)
//! Entities: "<text>" (<label>), ...
//!
//! Labels: [<label>, ...]
//!
//! Sentence: <test tokens>
//! Entities:
//! ```
//!
//! One demonstration block is emitted per demo. Replies are read either as a
//! JSON array of `{"text", "label"}` objects or, failing that, as a sequence
//! of `"text" (label)` items.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{AnnotatedExample, EntitySpan, LabelSet, Sentence};

pub const TEMPLATE_VERSION: u32 = 1;

pub const INSTRUCTION: &str =
    "extracting entity and their types from a given sentence based on your knowledge";

pub const NO_GRAMMAR: &str = "no grammar matched";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("demonstration {0} has no boundary annotation but the template marks boundaries")]
    MissingBoundary(String),
    #[error("demonstration {id} uses label {label} which is not in the label set")]
    UnknownLabel { id: String, label: String },
    #[error("label {0:?} cannot be rendered: labels must not contain parentheses or newlines")]
    UnrenderableLabel(String),
    #[error("template field {field}: {message}")]
    Template {
        field: &'static str,
        message: String,
    },
    #[error("template version {0} is not supported")]
    Version(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template file {path}: {message}")]
    Parse { path: String, message: String },
}

/// Where the highest-ranked demonstration goes in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DemoOrder {
    BestFirst,
    /// Closest demonstration adjacent to the test sentence.
    #[default]
    BestLast,
}

/// Prompt layout. Line formats use `{name}` placeholders; `{{` and `}}`
/// produce literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub version: u32,
    pub instruction: String,
    /// Placeholder: `{tokens}`.
    pub sentence_line: String,
    /// Placeholder: `{tags}`.
    pub pos_line: String,
    /// Placeholder: `{tree}`.
    pub tree_line: String,
    /// Placeholder: `{entities}`.
    pub entities_line: String,
    /// Placeholders: `{text}`, `{label}`. `{text}` is emitted as a quoted,
    /// escaped string.
    pub entity_item: String,
    pub entity_separator: String,
    /// Placeholder: `{labels}`.
    pub labels_line: String,
    pub label_separator: String,
    /// Final line after the test sentence.
    pub cue: String,
    pub include_pos: bool,
    pub include_tree: bool,
    pub demo_order: DemoOrder,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: TEMPLATE_VERSION,
            instruction: INSTRUCTION.to_string(),
            sentence_line: "Sentence: {tokens}".into(),
            pos_line: "POS: {tags}".into(),
            tree_line: "Tree: {tree}".into(),
            entities_line: "Entities: {entities}".into(),
            entity_item: "{text} ({label})".into(),
            entity_separator: ", ".into(),
            labels_line: "Labels: [{labels}]".into(),
            label_separator: ", ".into(),
            cue: "Entities:".into(),
            include_pos: true,
            include_tree: true,
            demo_order: DemoOrder::BestLast,
        }
    }
}

fn fill(format: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(format.len());
    let mut rest = format;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if let Some(close) = tail.find('}').filter(|_| tail.starts_with('{')) {
            let name = &tail[1..close];
            if let Some((_, v)) = values.iter().find(|(n, _)| *n == name) {
                out.push_str(v);
                rest = &tail[close + 1..];
                continue;
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn placeholders(format: &str) -> Result<Vec<&str>, String> {
    let mut names = Vec::new();
    let mut rest = format;
    while let Some(i) = rest.find(['{', '}']) {
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            return Err("unmatched '}'".into());
        } else {
            let close = tail.find('}').ok_or("unclosed '{'")?;
            names.push(&tail[1..close]);
            rest = &tail[close + 1..];
        }
    }
    Ok(names)
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.version != TEMPLATE_VERSION {
            return Err(PromptError::Version(self.version));
        }
        let lines: [(&'static str, &str, &[&str]); 7] = [
            ("sentence_line", &self.sentence_line, &["tokens"]),
            ("pos_line", &self.pos_line, &["tags"]),
            ("tree_line", &self.tree_line, &["tree"]),
            ("entities_line", &self.entities_line, &["entities"]),
            ("entity_item", &self.entity_item, &["text", "label"]),
            ("labels_line", &self.labels_line, &["labels"]),
            ("cue", &self.cue, &[]),
        ];
        for (field, format, allowed) in lines {
            let err = |message: String| PromptError::Template { field, message };
            if format.contains('\n') {
                return Err(err("must be a single line".into()));
            }
            for name in placeholders(format).map_err(err)? {
                if !allowed.contains(&name) {
                    return Err(err(format!("unknown placeholder {{{name}}}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let t = Self::from_toml(&text).map_err(|message| PromptError::Parse {
            path: path.display().to_string(),
            message,
        })?;
        t.validate()?;
        Ok(t)
    }

    fn marks_boundaries(&self) -> bool {
        self.include_pos || self.include_tree
    }

    /// The `Entities:` line for a set of spans, items in (start, end) order.
    pub fn render_entities(&self, sentence: &Sentence, spans: &[EntitySpan]) -> String {
        let mut ordered: Vec<&EntitySpan> = spans.iter().collect();
        ordered.sort();
        let items: Vec<String> = ordered
            .iter()
            .map(|s| {
                let text = quote(&s.surface(sentence).join(" "));
                fill(&self.entity_item, &[("text", &text), ("label", &s.label)])
            })
            .collect();
        fill(
            &self.entities_line,
            &[("entities", &items.join(&self.entity_separator))],
        )
    }
}

fn quote(text: &str) -> String {
    serde_json::to_string(text).expect("string serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    /// Demonstration ids in the order they appear in `text`.
    pub demo_ids: Vec<String>,
    pub labels: Vec<String>,
    pub test_id: String,
}

/// Renders a prompt. `demos` are in retrieval rank order, best first; the
/// template decides where the best one lands.
pub fn render_prompt(
    template: &PromptTemplate,
    demos: &[&AnnotatedExample],
    labels: &LabelSet,
    test: &Sentence,
) -> Result<PromptBundle, PromptError> {
    template.validate()?;
    for l in labels.iter() {
        if l.contains(['(', ')', '\n', '\r']) {
            return Err(PromptError::UnrenderableLabel(l.to_string()));
        }
    }
    for d in demos {
        if template.marks_boundaries() && d.boundary.is_none() {
            return Err(PromptError::MissingBoundary(d.id().to_string()));
        }
        if let Some(s) = d.entities.iter().find(|s| !labels.contains(&s.label)) {
            return Err(PromptError::UnknownLabel {
                id: d.id().to_string(),
                label: s.label.clone(),
            });
        }
    }

    let mut ordered: Vec<&AnnotatedExample> = demos.to_vec();
    if template.demo_order == DemoOrder::BestLast {
        ordered.reverse();
    }

    let mut blocks = vec![template.instruction.clone()];
    for d in &ordered {
        let mut lines = vec![fill(
            &template.sentence_line,
            &[("tokens", &d.sentence.text())],
        )];
        let b = d.boundary.as_ref();
        if let (true, Some(b)) = (template.include_pos, b) {
            lines.push(fill(&template.pos_line, &[("tags", &b.pos.tags.join(" "))]));
        }
        if let (true, Some(b)) = (template.include_tree, b) {
            lines.push(fill(&template.tree_line, &[("tree", &b.tree.render())]));
        }
        lines.push(template.render_entities(&d.sentence, &d.entities));
        blocks.push(lines.join("\n"));
    }
    let label_list: Vec<&str> = labels.iter().collect();
    blocks.push(fill(
        &template.labels_line,
        &[("labels", &label_list.join(&template.label_separator))],
    ));
    blocks.push(format!(
        "{}\n{}",
        fill(&template.sentence_line, &[("tokens", &test.text())]),
        template.cue
    ));

    Ok(PromptBundle {
        text: blocks.join("\n\n"),
        demo_ids: ordered.iter().map(|d| d.id().to_string()).collect(),
        labels: labels.as_slice().to_vec(),
        test_id: test.id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grammar {
    JsonArray,
    QuotedItems,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedItem {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Index into `ParsedPrediction::items`, when the problem is item-specific.
    pub item: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub grammar: Option<Grammar>,
    pub items: Vec<PredictedItem>,
    pub spans: BTreeSet<EntitySpan>,
    pub diagnostics: Vec<Diagnostic>,
}

fn item_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""((?:[^"\\\n]|\\.)*)"[ \t]*\(([^()\n]*)\)"#).unwrap())
}

fn parse_json_items(text: &str, diagnostics: &mut Vec<Diagnostic>) -> Option<Vec<PredictedItem>> {
    let array = serde_json::from_str::<Vec<Value>>(text.trim())
        .ok()
        .or_else(|| {
            let open = text.find('[')?;
            let close = text.rfind(']')?;
            (open < close).then(|| serde_json::from_str::<Vec<Value>>(&text[open..=close]).ok())?
        })?;
    let mut items = Vec::new();
    for (i, v) in array.iter().enumerate() {
        match (
            v.get("text").and_then(Value::as_str),
            v.get("label").and_then(Value::as_str),
        ) {
            (Some(t), Some(l)) => items.push(PredictedItem {
                text: t.to_string(),
                label: l.to_string(),
            }),
            _ => diagnostics.push(Diagnostic {
                item: None,
                message: format!("array element {i} is not a {{text, label}} object"),
            }),
        }
    }
    Some(items)
}

fn parse_quoted_items(text: &str) -> Vec<PredictedItem> {
    item_regex()
        .captures_iter(text)
        .map(|c| {
            let raw = &c[1];
            let text = serde_json::from_str::<String>(&format!("\"{raw}\""))
                .unwrap_or_else(|_| raw.to_string());
            PredictedItem {
                text,
                label: c[2].to_string(),
            }
        })
        .collect()
}

/// All spans of `sentence` whose space-joined tokens equal `text`, in
/// (start, end) order.
fn occurrences(sentence: &Sentence, text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in 0..sentence.tokens.len() {
        let mut joined = String::new();
        for end in start + 1..=sentence.tokens.len() {
            if end > start + 1 {
                joined.push(' ');
            }
            joined.push_str(&sentence.tokens[end - 1]);
            if !text.starts_with(joined.as_str()) {
                break;
            }
            if joined.len() == text.len() {
                out.push((start, end));
            }
        }
    }
    out
}

/// Parses a model reply into spans over `sentence`. Never fails: anything
/// unusable is dropped and explained in `diagnostics`.
///
/// Each item is aligned to the first occurrence of its exact token sequence
/// not already taken by an earlier item with the same text and label.
pub fn parse_lm_output(text: &str, sentence: &Sentence, labels: &LabelSet) -> ParsedPrediction {
    let mut diagnostics = Vec::new();
    let (grammar, items) = match parse_json_items(text, &mut diagnostics) {
        Some(items) => (Some(Grammar::JsonArray), items),
        None => {
            let items = parse_quoted_items(text);
            if items.is_empty() {
                diagnostics.push(Diagnostic {
                    item: None,
                    message: NO_GRAMMAR.to_string(),
                });
                (None, items)
            } else {
                (Some(Grammar::QuotedItems), items)
            }
        }
    };

    let mut taken: HashMap<(&str, &str), usize> = HashMap::new();
    let mut spans = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        if !labels.contains(&item.label) {
            diagnostics.push(Diagnostic {
                item: Some(i),
                message: format!("unknown label {:?}", item.label),
            });
            continue;
        }
        let used = taken
            .entry((item.text.as_str(), item.label.as_str()))
            .or_insert(0);
        match occurrences(sentence, &item.text).get(*used) {
            Some(&(start, end)) => {
                *used += 1;
                spans.insert(EntitySpan::new(start, end, item.label.clone()));
            }
            None => diagnostics.push(Diagnostic {
                item: Some(i),
                message: if *used == 0 {
                    format!("{:?} does not occur in the sentence", item.text)
                } else {
                    format!("{:?} occurs only {} time(s)", item.text, used)
                },
            }),
        }
    }
    ParsedPrediction {
        grammar,
        items,
        spans,
        diagnostics,
    }
}

/// One prompt/reply exchange. Timing is left out so transcripts of
/// identical runs are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sentence_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub prompt: String,
    pub reply: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
}

pub fn write_transcript_entry(w: &mut impl Write, entry: &TranscriptEntry) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, entry)?;
    w.write_all(b"\n")
}

pub fn read_transcript(r: impl BufRead) -> Result<Vec<TranscriptEntry>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
