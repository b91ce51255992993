//! Boundary features: POS tag sequences and constituency trees.
//!
//! Trees are read from and written to the usual bracketed notation,
//! `(S (NP John) (VP runs))`. Leaves must spell the sentence tokens in order;
//! `(` and `)` inside tokens are written as `-LRB-` / `-RRB-`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedExample, Sentence};

#[derive(Debug, Error, PartialEq)]
pub enum BoundaryError {
    #[error("unbalanced at offset {offset}")]
    Unbalanced { offset: usize },
    #[error("parse error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("tree leaves diverge from tokens at position {position}: expected {expected:?}, found {found:?}")]
    Alignment {
        position: usize,
        expected: Option<String>,
        found: Option<String>,
    },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("POS sequence has {got} tags for {expected} tokens")]
    PosLength { expected: usize, got: usize },
    #[error("tree covers {got} tokens, sentence has {expected}")]
    TreeLength { expected: usize, got: usize },
    #[error("annotator: {0}")]
    Annotator(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosTagSequence {
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Syntactic category for internal nodes, the token text for leaves.
    pub label: String,
    pub children: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A constituency tree whose leaves are the sentence tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstituencyTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

impl ConstituencyTree {
    /// Builds a tree from explicit nodes, checking every structural invariant.
    pub fn from_nodes(nodes: Vec<TreeNode>, root: usize) -> Result<Self, BoundaryError> {
        let tree = Self { nodes, root };
        tree.validate()?;
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node ids in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.is_leaf() {
                out.push(id);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    pub fn num_tokens(&self) -> usize {
        self.nodes.get(self.root).map_or(0, |r| r.end)
    }

    fn validate(&self) -> Result<(), BoundaryError> {
        let bad = |m: String| Err(BoundaryError::InvalidTree(m));
        let n = self.nodes.len();
        if self.root >= n {
            return bad(format!("root {} out of range", self.root));
        }
        let mut parent = vec![None; n];
        for (id, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                if c >= n {
                    return bad(format!("node {id} has unknown child {c}"));
                }
                if c == self.root {
                    return bad(format!("root {c} has a parent"));
                }
                if parent[c].replace(id).is_some() {
                    return bad(format!("node {c} has two parents"));
                }
            }
        }
        if let Some(orphan) = (0..n).find(|&i| i != self.root && parent[i].is_none()) {
            return bad(format!("node {orphan} is unreachable"));
        }
        // Every non-root node has exactly one parent; reaching all nodes from
        // the root rules out cycles.
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return bad(format!("cycle through node {id}"));
            }
            stack.extend(&self.nodes[id].children);
        }
        if seen.iter().any(|s| !s) {
            return bad("cycle detached from root".into());
        }
        for (pos, &leaf) in self.leaves().iter().enumerate() {
            let node = &self.nodes[leaf];
            if node.start != pos || node.end != pos + 1 {
                return bad(format!(
                    "leaf {leaf} spans [{},{}) but is token {pos}",
                    node.start, node.end
                ));
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() {
                continue;
            }
            let mut cursor = node.start;
            for &c in &node.children {
                if self.nodes[c].start != cursor {
                    return bad(format!("children of node {id} are not contiguous"));
                }
                cursor = self.nodes[c].end;
            }
            if cursor != node.end {
                return bad(format!("node {id} span does not match its children"));
            }
        }
        Ok(())
    }

    /// Bracketed rendering with single spaces between constituents.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_node(self.root, &mut out);
        out
    }

    fn render_node(&self, id: usize, out: &mut String) {
        let node = &self.nodes[id];
        if node.is_leaf() {
            out.push_str(&escape_leaf(&node.label));
            return;
        }
        out.push('(');
        out.push_str(&node.label);
        for &c in &node.children {
            out.push(' ');
            self.render_node(c, out);
        }
        out.push(')');
    }
}

fn escape_leaf(token: &str) -> String {
    token.replace('(', "-LRB-").replace(')', "-RRB-")
}

fn unescape_leaf(leaf: &str) -> String {
    leaf.replace("-LRB-", "(").replace("-RRB-", ")")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryAnnotation {
    pub pos: PosTagSequence,
    pub tree: ConstituencyTree,
}

impl BoundaryAnnotation {
    pub fn new(pos: Vec<String>, tree: ConstituencyTree) -> Result<Self, BoundaryError> {
        let ann = Self {
            pos: PosTagSequence { tags: pos },
            tree,
        };
        let n = ann.tree.num_tokens();
        ann.check_len(n)?;
        Ok(ann)
    }

    pub fn check_len(&self, n: usize) -> Result<(), BoundaryError> {
        if self.pos.tags.len() != n {
            return Err(BoundaryError::PosLength {
                expected: n,
                got: self.pos.tags.len(),
            });
        }
        if self.tree.num_tokens() != n {
            return Err(BoundaryError::TreeLength {
                expected: n,
                got: self.tree.num_tokens(),
            });
        }
        Ok(())
    }
}

struct TreeParser<'a> {
    text: &'a str,
    pos: usize,
    nodes: Vec<TreeNode>,
    next_token: usize,
}

impl<'a> TreeParser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.text[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn atom(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.text[start..self.pos]
    }

    /// Parses `( LABEL child+ )` with the cursor on `(`.
    fn constituent(&mut self) -> Result<usize, BoundaryError> {
        let open = self.pos;
        self.pos += 1;
        self.skip_ws();
        let label = self.atom().to_string();
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            label,
            children: Vec::new(),
            start: self.next_token,
            end: self.next_token,
        });
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(BoundaryError::Unbalanced { offset: self.pos }),
                Some(')') => {
                    self.pos += 1;
                    break;
                }
                Some('(') => children.push(self.constituent()?),
                Some(_) => {
                    let word = unescape_leaf(self.atom());
                    let leaf = self.nodes.len();
                    self.nodes.push(TreeNode {
                        label: word,
                        children: Vec::new(),
                        start: self.next_token,
                        end: self.next_token + 1,
                    });
                    self.next_token += 1;
                    children.push(leaf);
                }
            }
        }
        if children.is_empty() {
            return Err(BoundaryError::Syntax {
                offset: open,
                message: "constituent without children".into(),
            });
        }
        let node = &mut self.nodes[id];
        node.children = children;
        node.end = self.next_token;
        Ok(id)
    }
}

/// Parses a bracketed tree and aligns its leaves with `tokens`.
///
/// A root with an empty label and a single child, as in `( (S ...))`, is
/// unwrapped.
pub fn parse_bracketed_tree(
    text: &str,
    tokens: &[String],
) -> Result<ConstituencyTree, BoundaryError> {
    let mut p = TreeParser {
        text,
        pos: 0,
        nodes: Vec::new(),
        next_token: 0,
    };
    p.skip_ws();
    match p.peek() {
        Some('(') => {}
        Some(')') => return Err(BoundaryError::Unbalanced { offset: p.pos }),
        _ => {
            return Err(BoundaryError::Syntax {
                offset: p.pos,
                message: "expected '('".into(),
            })
        }
    }
    let mut root = p.constituent()?;
    p.skip_ws();
    match p.peek() {
        None => {}
        Some(')') => return Err(BoundaryError::Unbalanced { offset: p.pos }),
        Some(_) => {
            return Err(BoundaryError::Syntax {
                offset: p.pos,
                message: "trailing input after tree".into(),
            })
        }
    }
    let mut nodes = p.nodes;
    if nodes[root].label.is_empty() {
        if nodes[root].children.len() == 1 && !nodes[nodes[root].children[0]].is_leaf() {
            root = nodes[root].children[0];
            // Drop the wrapper and shift ids.
            nodes.remove(0);
            for n in &mut nodes {
                for c in &mut n.children {
                    *c -= 1;
                }
            }
            root -= 1;
        } else {
            return Err(BoundaryError::Syntax {
                offset: 0,
                message: "root constituent has no label".into(),
            });
        }
    }
    if let Some((i, _)) = nodes
        .iter()
        .enumerate()
        .find(|(_, n)| !n.is_leaf() && n.label.is_empty())
    {
        return Err(BoundaryError::InvalidTree(format!(
            "internal node {i} has no label"
        )));
    }

    let tree = ConstituencyTree::from_nodes(nodes, root)?;
    let leaves = tree.leaves();
    for position in 0..leaves.len().max(tokens.len()) {
        let found = leaves.get(position).map(|&l| tree.nodes[l].label.clone());
        let expected = tokens.get(position).cloned();
        if found != expected {
            return Err(BoundaryError::Alignment {
                position,
                expected,
                found,
            });
        }
    }
    Ok(tree)
}

/// Label given to leaf nodes when no POS tags are supplied.
pub const LEAF_LABEL: &str = "<leaf>";

/// Graph view of a tree for graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGraph {
    /// `D^{-1/2} (A + I) D^{-1/2}` over the undirected parent/child edges.
    pub adjacency: Array2<f64>,
    /// Per-node feature label: syntactic category for internal nodes, the
    /// POS tag (or [`LEAF_LABEL`]) for leaves.
    pub labels: Vec<String>,
}

impl TreeGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> TreeGraph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let adjacency = Array2::from_shape_fn((n, n), |(i, j)| self.adjacency[[perm[i], perm[j]]]);
        TreeGraph {
            adjacency,
            labels: perm.iter().map(|&p| self.labels[p].clone()).collect(),
        }
    }
}

pub fn tree_to_graph(tree: &ConstituencyTree, pos: Option<&PosTagSequence>) -> TreeGraph {
    let n = tree.len();
    let mut a = Array2::<f64>::eye(n);
    for (id, node) in tree.nodes.iter().enumerate() {
        for &c in &node.children {
            a[[id, c]] = 1.0;
            a[[c, id]] = 1.0;
        }
    }
    let inv_sqrt_deg: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    let labels = tree
        .nodes
        .iter()
        .map(|node| {
            if node.is_leaf() {
                pos.and_then(|p| p.tags.get(node.start).cloned())
                    .unwrap_or_else(|| LEAF_LABEL.to_string())
            } else {
                node.label.clone()
            }
        })
        .collect();
    TreeGraph {
        adjacency: a,
        labels,
    }
}

impl BoundaryAnnotation {
    pub fn graph(&self) -> TreeGraph {
        tree_to_graph(&self.tree, Some(&self.pos))
    }
}

/// Runs an external POS tagger / parser as a subprocess.
///
/// Protocol, one JSON object per line on both streams:
/// stdin receives `{"id": str, "tokens": [str]}`, stdout must answer each
/// request in order with `{"pos": [str], "constituency": str}`.
#[derive(Debug, Clone)]
pub struct ExternalAnnotator {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Serialize)]
struct AnnotatorRequest<'a> {
    id: &'a str,
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct AnnotatorReply {
    pos: Vec<String>,
    constituency: String,
}

impl ExternalAnnotator {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }

    pub fn annotate(
        &self,
        sentences: &[Sentence],
    ) -> Result<Vec<BoundaryAnnotation>, BoundaryError> {
        let err = |m: String| BoundaryError::Annotator(m);
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| err(format!("cannot start {}: {e}", self.program)))?;

        let mut payload = Vec::new();
        for s in sentences {
            let req = AnnotatorRequest {
                id: &s.id,
                tokens: &s.tokens,
            };
            serde_json::to_writer(&mut payload, &req).map_err(|e| err(e.to_string()))?;
            payload.push(b'\n');
        }
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let writer = std::thread::spawn(move || stdin.write_all(&payload));

        let stdout = child.stdout.take().expect("stdout is piped");
        let mut out = Vec::with_capacity(sentences.len());
        let mut lines = BufReader::new(stdout).lines();
        for s in sentences {
            let line = lines
                .next()
                .ok_or_else(|| err(format!("no reply for sentence {}", s.id)))?
                .map_err(|e| err(e.to_string()))?;
            let reply: AnnotatorReply = serde_json::from_str(&line)
                .map_err(|e| err(format!("bad reply for sentence {}: {e}", s.id)))?;
            let tree = parse_bracketed_tree(&reply.constituency, &s.tokens)?;
            let ann = BoundaryAnnotation::new(reply.pos, tree)?;
            ann.check_len(s.len())?;
            out.push(ann);
        }
        writer
            .join()
            .map_err(|_| err("writer thread panicked".into()))?
            .map_err(|e| err(format!("writing to annotator: {e}")))?;
        let status = child.wait().map_err(|e| err(e.to_string()))?;
        if !status.success() {
            return Err(err(format!("annotator exited with {status}")));
        }
        Ok(out)
    }

    /// Fills in boundary annotations for examples that lack them.
    pub fn annotate_missing(
        &self,
        examples: &mut [AnnotatedExample],
    ) -> Result<usize, BoundaryError> {
        let missing: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.boundary.is_none().then_some(i))
            .collect();
        if missing.is_empty() {
            return Ok(0);
        }
        let sentences: Vec<Sentence> = missing
            .iter()
            .map(|&i| examples[i].sentence.clone())
            .collect();
        let anns = self.annotate(&sentences)?;
        for (i, ann) in missing.iter().zip(anns) {
            examples[*i].boundary = Some(ann);
        }
        Ok(missing.len())
    }
}
