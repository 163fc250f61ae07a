use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::ClassId;
use crate::error::{Error, Result};

/// Map from object class to context (cluster) id in `[0, K)`.
///
/// Serialized as `{"K": int, "assignment": {"<class>": <cluster>, ...}}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextDictionary {
    k: usize,
    assignment: Vec<usize>,
}

impl ContextDictionary {
    /// Checks totality and that every cluster id is used.
    pub fn new(k: usize, assignment: Vec<usize>) -> Result<Self> {
        if k == 0 || k > assignment.len() {
            return Err(Error::input(format!(
                "dictionary K = {k} must lie in [1, {}]",
                assignment.len()
            )));
        }
        let mut used = vec![false; k];
        for (class, &c) in assignment.iter().enumerate() {
            if c >= k {
                return Err(Error::input(format!("class {class} maps to cluster {c} >= K = {k}")));
            }
            used[c] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::input(format!("cluster {empty} has no member class")));
        }
        Ok(ContextDictionary { k, assignment })
    }

    pub fn identity(n: usize) -> Self {
        ContextDictionary { k: n, assignment: (0..n).collect() }
    }

    pub fn single(n: usize) -> Self {
        ContextDictionary { k: 1, assignment: vec![0; n] }
    }

    /// Cluster ids follow the iteration order of `clusters`.
    pub fn from_clusters(n: usize, clusters: impl IntoIterator<Item = Vec<ClassId>>) -> Result<Self> {
        let mut assignment = vec![usize::MAX; n];
        let mut k = 0;
        for members in clusters {
            for c in members {
                match assignment.get_mut(c) {
                    Some(slot) if *slot == usize::MAX => *slot = k,
                    Some(_) => return Err(Error::input(format!("class {c} appears in two clusters"))),
                    None => return Err(Error::input(format!("class {c} out of range [0, {n})"))),
                }
            }
            k += 1;
        }
        if let Some(missing) = assignment.iter().position(|&c| c == usize::MAX) {
            return Err(Error::input(format!("class {missing} is not assigned to any cluster")));
        }
        ContextDictionary::new(k, assignment)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn context_of(&self, class: ClassId) -> Result<usize> {
        self.assignment
            .get(class)
            .copied()
            .ok_or_else(|| Error::lookup(format!("class {class} is not in the context dictionary")))
    }

    /// Member classes of each cluster, by cluster id.
    pub fn members(&self) -> Vec<Vec<ClassId>> {
        let mut out = vec![Vec::new(); self.k];
        for (class, &c) in self.assignment.iter().enumerate() {
            out[c].push(class);
        }
        out
    }

    /// Same partition with cluster ids renumbered by smallest member.
    pub fn canonical(&self) -> Self {
        let mut members = self.members();
        members.sort_by_key(|m| m[0]);
        ContextDictionary::from_clusters(self.num_classes(), members).expect("valid partition")
    }

    /// True when both dictionaries describe the same partition of the classes.
    pub fn same_partition(&self, other: &Self) -> bool {
        self.canonical() == other.canonical()
    }
}

#[derive(Serialize, Deserialize)]
struct DictionaryRepr {
    #[serde(rename = "K")]
    k: usize,
    assignment: BTreeMap<usize, usize>,
}

impl Serialize for ContextDictionary {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        DictionaryRepr {
            k: self.k,
            assignment: self.assignment.iter().copied().enumerate().collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ContextDictionary {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = DictionaryRepr::deserialize(deserializer)?;
        let n = repr.assignment.len();
        if repr.assignment.keys().copied().ne(0..n) {
            return Err(serde::de::Error::custom("assignment keys must be the classes 0..N"));
        }
        ContextDictionary::new(repr.k, repr.assignment.into_values().collect()).map_err(serde::de::Error::custom)
    }
}
