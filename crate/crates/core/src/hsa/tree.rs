//! Merge hierarchy produced by clustering, with nested-JSON and Newick codecs.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::kg::NodeId;
use crate::scalar::Similarity;

/// One agglomeration step. Leaves are the classes `0..N`; the node created at
/// step `s` has id `N + s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge<S> {
    pub id: NodeId,
    pub left: NodeId,
    pub right: NodeId,
    pub step: usize,
    /// Raw similarity of the merged pair.
    pub similarity: S,
    /// Penalized score `similarity / (l_left + l_right)` that won the step.
    pub score: S,
}

/// Binary merge forest over `num_leaves` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTree<S> {
    pub num_leaves: usize,
    pub merges: Vec<Merge<S>>,
}

impl<S: Similarity> MergeTree<S> {
    pub fn new(num_leaves: usize, merges: Vec<Merge<S>>) -> Result<Self> {
        let mut alive = vec![true; num_leaves + merges.len()];
        for (step, m) in merges.iter().enumerate() {
            if m.step != step || m.id != num_leaves + step {
                return Err(Error::input(format!(
                    "merge step {step} has id {} / step {}, expected id {}",
                    m.id,
                    m.step,
                    num_leaves + step
                )));
            }
            for child in [m.left, m.right] {
                if child >= m.id || !alive[child] || m.left == m.right {
                    return Err(Error::input(format!("merge {} has invalid child {child}", m.id)));
                }
                alive[child] = false;
            }
        }
        Ok(MergeTree { num_leaves, merges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_leaves + self.merges.len()
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        node < self.num_leaves
    }

    pub fn merge(&self, node: NodeId) -> Option<&Merge<S>> {
        node.checked_sub(self.num_leaves).and_then(|i| self.merges.get(i))
    }

    /// Leaves below `node`, ascending.
    pub fn leaves(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match self.merge(n) {
                Some(m) => stack.extend([m.left, m.right]),
                None => out.push(n),
            }
        }
        out.sort_unstable();
        out
    }

    /// Nodes without a parent, ordered by their smallest leaf.
    pub fn roots(&self) -> Vec<NodeId> {
        let mut has_parent = vec![false; self.num_nodes()];
        for m in &self.merges {
            has_parent[m.left] = true;
            has_parent[m.right] = true;
        }
        let mut roots: Vec<(NodeId, NodeId)> = (0..self.num_nodes())
            .filter(|&n| !has_parent[n])
            .map(|n| (self.leaves(n)[0], n))
            .collect();
        roots.sort_unstable();
        roots.into_iter().map(|(_, n)| n).collect()
    }
}

/// Text encodings of a [`MergeTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum HierarchyFormat {
    #[value(alias = "json")]
    NestedJson,
    Newick,
}

impl FromStr for HierarchyFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested-json" | "json" => Ok(HierarchyFormat::NestedJson),
            "newick" => Ok(HierarchyFormat::Newick),
            other => Err(Error::input(format!("unknown hierarchy format `{other}` (expected nested-json or newick)"))),
        }
    }
}

/// Serializes the forest. `names`, when given, labels leaf `i` with `names[i]`.
pub fn export_hierarchy<S: Similarity>(tree: &MergeTree<S>, format: HierarchyFormat, names: Option<&[String]>) -> String {
    match format {
        HierarchyFormat::NestedJson => {
            let roots: Vec<Value> = tree.roots().into_iter().map(|r| node_json(tree, r, names)).collect();
            let mut s = serde_json::to_string_pretty(&Value::Array(roots)).expect("json values serialize");
            s.push('\n');
            s
        }
        HierarchyFormat::Newick => {
            let mut out = String::new();
            for r in tree.roots() {
                newick_node(tree, r, names, &mut out);
                out.push_str(";\n");
            }
            out
        }
    }
}

fn node_json<S: Similarity>(tree: &MergeTree<S>, node: NodeId, names: Option<&[String]>) -> Value {
    match tree.merge(node) {
        Some(m) => json!({
            "id": m.id,
            "step": m.step,
            "similarity": m.similarity.to_text(),
            "score": m.score.to_text(),
            "children": [node_json(tree, m.left, names), node_json(tree, m.right, names)],
        }),
        None => {
            let mut obj = Map::new();
            obj.insert("id".into(), json!(node));
            if let Some(name) = names.and_then(|n| n.get(node)) {
                obj.insert("name".into(), json!(name));
            }
            Value::Object(obj)
        }
    }
}

fn newick_node<S: Similarity>(tree: &MergeTree<S>, node: NodeId, names: Option<&[String]>, out: &mut String) {
    match tree.merge(node) {
        Some(m) => {
            out.push('(');
            newick_node(tree, m.left, names, out);
            out.push(',');
            newick_node(tree, m.right, names, out);
            out.push_str(&format!(
                ")[&&NHX:id={}:step={}:sim={}:score={}]",
                m.id,
                m.step,
                m.similarity.to_text(),
                m.score.to_text()
            ));
        }
        None => match names.and_then(|n| n.get(node)) {
            Some(name) => out.push_str(&format!("'{}'[&&NHX:id={node}]", name.replace('\'', "''"))),
            None => out.push_str(&node.to_string()),
        },
    }
}

struct Parsed<S> {
    leaves: BTreeMap<NodeId, Option<String>>,
    merges: BTreeMap<usize, Merge<S>>,
}

impl<S: Similarity> Parsed<S> {
    fn new() -> Self {
        Parsed { leaves: BTreeMap::new(), merges: BTreeMap::new() }
    }

    fn add_leaf(&mut self, id: NodeId, name: Option<String>) -> Result<NodeId> {
        if self.leaves.insert(id, name).is_some() {
            return Err(Error::input(format!("leaf {id} appears twice")));
        }
        Ok(id)
    }

    fn add_merge(&mut self, m: Merge<S>) -> Result<NodeId> {
        let id = m.id;
        if self.merges.insert(m.step, m).is_some() {
            return Err(Error::input(format!("merge step of node {id} appears twice")));
        }
        Ok(id)
    }

    fn finish(self) -> Result<(MergeTree<S>, Option<Vec<String>>)> {
        let n = self.leaves.len();
        if self.leaves.keys().copied().ne(0..n) {
            return Err(Error::input("hierarchy leaves must be exactly the classes 0..N"));
        }
        let names: Option<Vec<String>> = self.leaves.into_values().collect();
        Ok((MergeTree::new(n, self.merges.into_values().collect())?, names))
    }
}

/// Parses either encoding back into a tree plus optional leaf names.
pub fn parse_hierarchy<S: Similarity>(text: &str, format: HierarchyFormat) -> Result<(MergeTree<S>, Option<Vec<String>>)> {
    let mut parsed = Parsed::new();
    match format {
        HierarchyFormat::NestedJson => {
            let value: Value = serde_json::from_str(text).map_err(|e| Error::Format {
                path: "<hierarchy>".into(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let roots = value.as_array().ok_or_else(|| Error::input("hierarchy must be a JSON array of roots"))?;
            for r in roots {
                json_node(r, &mut parsed)?;
            }
        }
        HierarchyFormat::Newick => {
            for tree in text.split(';').map(str::trim).filter(|t| !t.is_empty()) {
                let mut p = NewickParser { s: tree.as_bytes(), pos: 0 };
                p.node(&mut parsed)?;
                if p.pos != p.s.len() {
                    return Err(Error::input(format!("trailing characters in newick tree `{tree}`")));
                }
            }
        }
    }
    parsed.finish()
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::input(format!("hierarchy node is missing `{key}`")))
}

fn as_index(v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::input(format!("expected a non-negative integer, found {v}")))
}

fn as_score<S: Similarity>(v: &Value) -> Result<S> {
    v.as_str()
        .and_then(S::parse_text)
        .ok_or_else(|| Error::input(format!("invalid similarity value {v}")))
}

fn json_node<S: Similarity>(v: &Value, parsed: &mut Parsed<S>) -> Result<NodeId> {
    let obj = v.as_object().ok_or_else(|| Error::input("hierarchy node must be an object"))?;
    let id = as_index(field(obj, "id")?)?;
    match obj.get("children") {
        None => {
            let name = obj.get("name").and_then(Value::as_str).map(str::to_owned);
            parsed.add_leaf(id, name)
        }
        Some(children) => {
            let children = children.as_array().filter(|c| c.len() == 2).ok_or_else(|| Error::input("internal node needs two children"))?;
            let left = json_node(&children[0], parsed)?;
            let right = json_node(&children[1], parsed)?;
            parsed.add_merge(Merge {
                id,
                left,
                right,
                step: as_index(field(obj, "step")?)?,
                similarity: as_score(field(obj, "similarity")?)?,
                score: as_score(field(obj, "score")?)?,
            })
        }
    }
}

struct NewickParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl NewickParser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::input(format!("newick: expected `{}` at byte {}", c as char, self.pos)))
        }
    }

    fn node<S: Similarity>(&mut self, parsed: &mut Parsed<S>) -> Result<NodeId> {
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let left = self.node(parsed)?;
            self.expect(b',')?;
            let right = self.node(parsed)?;
            self.expect(b')')?;
            let tags = self.nhx()?;
            let get = |k: &str| tags.get(k).ok_or_else(|| Error::input(format!("newick: internal node missing `{k}`")));
            let num = |k: &str| -> Result<usize> {
                get(k)?.parse().map_err(|_| Error::input(format!("newick: bad `{k}`")))
            };
            let score = |k: &str| -> Result<S> {
                S::parse_text(get(k)?).ok_or_else(|| Error::input(format!("newick: bad `{k}`")))
            };
            parsed.add_merge(Merge {
                id: num("id")?,
                left,
                right,
                step: num("step")?,
                similarity: score("sim")?,
                score: score("score")?,
            })
        } else if self.peek() == Some(b'\'') {
            let name = self.quoted()?;
            let tags = self.nhx()?;
            let id = tags
                .get("id")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::input("newick: named leaf needs an NHX id"))?;
            parsed.add_leaf(id, Some(name))
        } else {
            let start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            let id = std::str::from_utf8(&self.s[start..self.pos])
                .ok()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::input(format!("newick: expected a leaf id at byte {start}")))?;
            parsed.add_leaf(id, None)
        }
    }

    fn quoted(&mut self) -> Result<String> {
        self.expect(b'\'')?;
        let mut bytes = Vec::new();
        loop {
            match self.peek() {
                Some(b'\'') if self.s.get(self.pos + 1) == Some(&b'\'') => {
                    bytes.push(b'\'');
                    self.pos += 2;
                }
                Some(b'\'') => {
                    self.pos += 1;
                    break;
                }
                Some(c) => {
                    bytes.push(c);
                    self.pos += 1;
                }
                None => return Err(Error::input("newick: unterminated quoted label")),
            }
        }
        String::from_utf8(bytes).map_err(|_| Error::input("newick: label is not utf-8"))
    }

    fn nhx(&mut self) -> Result<BTreeMap<String, String>> {
        const OPEN: &[u8] = b"[&&NHX";
        if !self.s[self.pos..].starts_with(OPEN) {
            return Ok(BTreeMap::new());
        }
        let end = self.s[self.pos..]
            .iter()
            .position(|&c| c == b']')
            .ok_or_else(|| Error::input("newick: unterminated NHX comment"))?
            + self.pos;
        let body = std::str::from_utf8(&self.s[self.pos + OPEN.len()..end]).map_err(|_| Error::input("newick: bad NHX"))?;
        self.pos = end + 1;
        Ok(body
            .split(':')
            .filter(|kv| !kv.is_empty())
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect())
    }
}
