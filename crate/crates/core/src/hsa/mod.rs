//! Hierarchical semantic aggregation: behavior-pattern similarity between
//! knowledge-graph nodes and the penalized agglomerative clustering that turns
//! the `N` object classes into `K` contexts.

mod dictionary;
mod tree;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId};
use crate::scalar::Similarity;

pub use dictionary::ContextDictionary;
pub use tree::{export_hierarchy, parse_hierarchy, HierarchyFormat, Merge, MergeTree};

fn overlap_term<S: Similarity>(shared: usize, degree_sum: u64) -> S {
    if shared == 0 {
        S::zero()
    } else {
        let shared = shared as u64;
        S::ratio(shared, degree_sum - shared)
    }
}

/// Behavior-pattern similarity of two distinct nodes:
///
/// `|L_s| / (d_in(a) + d_in(b) - |L_s|) + |L_o| / (d_out(a) + d_out(b) - |L_o|)`,
///
/// where a term with an empty connection set is zero.
pub fn similarity<S: Similarity>(kg: &KnowledgeGraph, a: NodeId, b: NodeId) -> Result<S> {
    let (ls, lo) = kg.connection_sizes(a, b)?;
    let (in_a, out_a) = kg.degrees(a)?;
    let (in_b, out_b) = kg.degrees(b)?;
    Ok(overlap_term::<S>(ls, in_a + in_b) + overlap_term::<S>(lo, out_a + out_b))
}

/// How the pairwise similarity table is refreshed after a merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityUpdate {
    /// Recompute only the pairs involving the merged cluster.
    #[default]
    Incremental,
    /// Recompute every remaining pair against the updated graph.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsaOptions {
    #[serde(default)]
    pub update: SimilarityUpdate,
}

/// A cluster tracked during agglomeration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    /// Node standing for this cluster in the working graph.
    pub node: NodeId,
    /// Original class ids, ascending.
    pub members: Vec<ClassId>,
    /// Merge penalty: 1 for singletons, `l_i + l_j + 1` after a merge.
    pub lambda: u64,
}

/// Result of [`hsa_cluster`].
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering<S> {
    pub dictionary: ContextDictionary,
    pub tree: MergeTree<S>,
    /// Clusters at termination, ordered by smallest member.
    pub clusters: Vec<Cluster>,
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

struct ClusterState<S> {
    kg: KnowledgeGraph,
    clusters: Vec<Cluster>,
    sim: BTreeMap<(NodeId, NodeId), S>,
    update: SimilarityUpdate,
}

impl<S: Similarity> ClusterState<S> {
    fn new(kg: &KnowledgeGraph, update: SimilarityUpdate) -> Result<Self> {
        let n = kg.vocab().num_object_classes;
        if kg.nodes().len() != n || kg.next_id() != n {
            return Err(Error::contract("clustering requires an unmerged knowledge graph"));
        }
        let clusters = (0..n)
            .map(|c| Cluster { node: c, members: vec![c], lambda: 1 })
            .collect();
        let mut state = ClusterState {
            kg: kg.clone(),
            clusters,
            sim: BTreeMap::new(),
            update,
        };
        state.recompute_all()?;
        Ok(state)
    }

    fn recompute_all(&mut self) -> Result<()> {
        let nodes: Vec<NodeId> = self.clusters.iter().map(|c| c.node).collect();
        let pairs: Vec<(NodeId, NodeId)> = nodes
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| nodes[i + 1..].iter().map(move |&b| (a, b)))
            .collect();
        let kg = &self.kg;
        let scores: Vec<S> = pairs
            .par_iter()
            .map(|&(a, b)| similarity(kg, a, b))
            .collect::<Result<_>>()?;
        self.sim = pairs.into_iter().map(|(a, b)| key(a, b)).zip(scores).collect();
        Ok(())
    }

    fn raw(&self, a: usize, b: usize) -> &S {
        &self.sim[&key(self.clusters[a].node, self.clusters[b].node)]
    }

    /// Current indices of the pair maximizing `sim / (l_a + l_b)`; the
    /// lexicographically smallest pair wins ties.
    fn select(&self) -> (usize, usize, S) {
        let mut best: Option<(usize, usize, S)> = None;
        for a in 0..self.clusters.len() {
            for b in a + 1..self.clusters.len() {
                let penalty = self.clusters[a].lambda + self.clusters[b].lambda;
                let score = self.raw(a, b).clone() / S::ratio(penalty, 1);
                if best.as_ref().is_none_or(|(_, _, s)| score.exceeds(s)) {
                    best = Some((a, b, score));
                }
            }
        }
        best.expect("at least two clusters")
    }

    fn merge(&mut self, a: usize, b: usize) -> Result<NodeId> {
        let (na, nb) = (self.clusters[a].node, self.clusters[b].node);
        let m = self.kg.merge_in_place(na, nb)?;
        let right = self.clusters.remove(b);
        let left = &mut self.clusters[a];
        left.node = m;
        left.members.extend(right.members);
        left.members.sort_unstable();
        left.lambda += right.lambda + 1;

        self.sim.retain(|&(x, y), _| x != na && x != nb && y != na && y != nb);
        match self.update {
            SimilarityUpdate::Incremental => {
                for c in &self.clusters {
                    if c.node != m {
                        self.sim.insert(key(c.node, m), similarity(&self.kg, c.node, m)?);
                    }
                }
            }
            SimilarityUpdate::Full => self.recompute_all()?,
        }
        Ok(m)
    }
}

/// Penalized agglomerative clustering of the graph's class nodes down to `k`
/// clusters.
///
/// Every step merges the pair with the largest `sim / (l_i + l_j)`, ties going
/// to the smallest pair of current indices. Clusters are indexed by their
/// smallest member class, so a merged cluster keeps the lower index. Merging
/// continues through all-zero scores until exactly `k` clusters remain.
pub fn hsa_cluster<S: Similarity>(kg: &KnowledgeGraph, k: usize, options: HsaOptions) -> Result<Clustering<S>> {
    let n = kg.vocab().num_object_classes;
    if k == 0 || k > n {
        return Err(Error::config(format!("cluster count K = {k} must lie in [1, {n}]")));
    }
    let mut state = ClusterState::<S>::new(kg, options.update)?;
    let mut merges = Vec::with_capacity(n - k);
    while state.clusters.len() > k {
        let (a, b, score) = state.select();
        let similarity = state.raw(a, b).clone();
        let (left, right) = (state.clusters[a].node, state.clusters[b].node);
        let id = state.merge(a, b)?;
        merges.push(Merge { id, left, right, step: merges.len(), similarity, score });
    }
    let dictionary = ContextDictionary::from_clusters(n, state.clusters.iter().map(|c| c.members.clone()))?;
    Ok(Clustering {
        dictionary,
        tree: MergeTree::new(n, merges)?,
        clusters: state.clusters,
    })
}

#[cfg(test)]
mod tests {
    use num_rational::Rational64;

    use super::*;
    use crate::corpus::RelationVocab;

    const MAN: usize = 0;
    const WOMAN: usize = 1;
    const HORSE: usize = 2;
    const ELEPHANT: usize = 3;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_triples(
            RelationVocab::new(4, 1),
            [((MAN, 0, HORSE), 2), ((WOMAN, 0, ELEPHANT), 1), ((MAN, 0, ELEPHANT), 1)],
        )
        .unwrap()
    }

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn toy_similarities() {
        let kg = toy();
        assert_eq!(similarity::<Rational64>(&kg, HORSE, ELEPHANT).unwrap(), r(1, 3));
        assert_eq!(similarity::<Rational64>(&kg, MAN, WOMAN).unwrap(), r(1, 3));
        assert_eq!(similarity::<Rational64>(&kg, MAN, HORSE).unwrap(), r(0, 1));
        let isolated = KnowledgeGraph::empty(RelationVocab::new(2, 1));
        assert_eq!(similarity::<f64>(&isolated, 0, 1).unwrap(), 0.0);
        assert!(matches!(similarity::<f64>(&kg, MAN, MAN), Err(Error::Contract(_))));
    }

    #[test]
    fn toy_clustering_to_two() {
        for update in [SimilarityUpdate::Incremental, SimilarityUpdate::Full] {
            let out = hsa_cluster::<Rational64>(&toy(), 2, HsaOptions { update }).unwrap();
            assert_eq!(out.dictionary.members(), vec![vec![MAN, WOMAN], vec![HORSE, ELEPHANT]]);
            let m = &out.tree.merges;
            assert_eq!((m[0].left, m[0].right, m[0].id), (MAN, WOMAN, 4));
            assert_eq!((m[1].left, m[1].right, m[1].id), (HORSE, ELEPHANT, 5));
            for merge in m {
                assert_eq!(merge.similarity, r(1, 3));
                assert_eq!(merge.score, r(1, 6));
            }
            assert_eq!(out.clusters.iter().map(|c| c.lambda).collect::<Vec<_>>(), vec![3, 3]);
        }
    }

    #[test]
    fn k_equal_n_is_identity() {
        let out = hsa_cluster::<f64>(&toy(), 4, HsaOptions::default()).unwrap();
        assert_eq!(out.dictionary, ContextDictionary::identity(4));
        assert!(out.tree.merges.is_empty());
    }

    #[test]
    fn k_one_merges_everything() {
        let out = hsa_cluster::<f64>(&toy(), 1, HsaOptions::default()).unwrap();
        assert_eq!(out.dictionary, ContextDictionary::single(4));
        assert_eq!(out.tree.merges.len(), 3);
        // After {man,woman} and {horse,elephant}, both scores are zero; merging proceeds.
        assert_eq!(out.tree.merges[2].similarity, 0.0);
        assert_eq!(out.clusters[0].lambda, 7);
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(hsa_cluster::<f64>(&toy(), 0, HsaOptions::default()), Err(Error::Config(_))));
        assert!(matches!(hsa_cluster::<f64>(&toy(), 5, HsaOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn merged_graph_is_rejected() {
        let (kg, _) = toy().merge_nodes(MAN, WOMAN).unwrap();
        assert!(hsa_cluster::<f64>(&kg, 1, HsaOptions::default()).is_err());
    }

    #[test]
    fn float_and_exact_agree_on_toy() {
        let a = hsa_cluster::<f64>(&toy(), 2, HsaOptions::default()).unwrap();
        let b = hsa_cluster::<Rational64>(&toy(), 2, HsaOptions::default()).unwrap();
        assert_eq!(a.dictionary, b.dictionary);
        assert!((a.tree.merges[0].score - 1.0 / 6.0).abs() < 1e-15);
    }
}
