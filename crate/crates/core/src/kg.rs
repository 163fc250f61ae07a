//! Global knowledge graph over object classes and object co-occurrence
//! statistics.
//!
//! The graph is a multigraph: every `(subject, predicate, object)` triple
//! carries an occurrence count. Nodes start as the `N` object classes and are
//! replaced by fresh ids as clusters are merged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{validate_corpus, PredicateId, RelationVocab, SceneSample};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub type NodeId = usize;

/// Adjacency of one node: `(predicate, neighbor) -> count`.
type Edges = BTreeMap<(PredicateId, NodeId), u64>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    vocab: RelationVocab,
    nodes: BTreeSet<NodeId>,
    next_id: NodeId,
    outgoing: BTreeMap<NodeId, Edges>,
    incoming: BTreeMap<NodeId, Edges>,
    in_degree: BTreeMap<NodeId, u64>,
    out_degree: BTreeMap<NodeId, u64>,
}

impl KnowledgeGraph {
    /// Graph with nodes `0..N` and no edges.
    pub fn empty(vocab: RelationVocab) -> Self {
        let n = vocab.num_object_classes;
        KnowledgeGraph {
            nodes: (0..n).collect(),
            next_id: n,
            outgoing: BTreeMap::new(),
            incoming: BTreeMap::new(),
            in_degree: BTreeMap::new(),
            out_degree: BTreeMap::new(),
            vocab,
        }
    }

    /// Builds a graph from explicit `(subject, predicate, object)` counts.
    pub fn from_triples(
        vocab: RelationVocab,
        triples: impl IntoIterator<Item = ((NodeId, PredicateId, NodeId), u64)>,
    ) -> Result<Self> {
        let mut kg = KnowledgeGraph::empty(vocab);
        for ((s, p, o), c) in triples {
            if s >= kg.next_id || o >= kg.next_id {
                return Err(Error::input(format!("triple ({s}, {p}, {o}) references an unknown class")));
            }
            if p >= kg.vocab.num_predicates {
                return Err(Error::input(format!("triple ({s}, {p}, {o}) has predicate out of range")));
            }
            kg.add(s, p, o, c);
        }
        Ok(kg)
    }

    pub fn vocab(&self) -> &RelationVocab {
        &self.vocab
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    /// Id the next merge will allocate.
    pub fn next_id(&self) -> NodeId {
        self.next_id
    }

    /// All triples with their counts, ordered by `(subject, predicate, object)`.
    pub fn triple_counts(&self) -> BTreeMap<(NodeId, PredicateId, NodeId), u64> {
        self.outgoing
            .iter()
            .flat_map(|(&s, edges)| edges.iter().map(move |(&(p, o), &c)| ((s, p, o), c)))
            .collect()
    }

    pub fn count(&self, s: NodeId, p: PredicateId, o: NodeId) -> u64 {
        self.outgoing
            .get(&s)
            .and_then(|e| e.get(&(p, o)))
            .copied()
            .unwrap_or(0)
    }

    pub fn total_count(&self) -> u64 {
        self.out_degree.values().sum()
    }

    pub fn num_triples(&self) -> usize {
        self.outgoing.values().map(BTreeMap::len).sum()
    }

    fn check(&self, node: NodeId) -> Result<()> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(Error::lookup(format!("node {node} is not in the knowledge graph")))
        }
    }

    fn add(&mut self, s: NodeId, p: PredicateId, o: NodeId, count: u64) {
        if count == 0 {
            return;
        }
        *self.outgoing.entry(s).or_default().entry((p, o)).or_default() += count;
        *self.incoming.entry(o).or_default().entry((p, s)).or_default() += count;
        *self.out_degree.entry(s).or_default() += count;
        *self.in_degree.entry(o).or_default() += count;
    }

    fn remove(&mut self, s: NodeId, p: PredicateId, o: NodeId) -> u64 {
        let Some(c) = self.outgoing.get_mut(&s).and_then(|e| e.remove(&(p, o))) else {
            return 0;
        };
        if let Some(e) = self.incoming.get_mut(&o) {
            e.remove(&(p, s));
        }
        for (map, node) in [(&mut self.out_degree, s), (&mut self.in_degree, o)] {
            let d = map.get_mut(&node).expect("degree tracked for every endpoint");
            *d -= c;
            if *d == 0 {
                map.remove(&node);
            }
        }
        c
    }

    /// `(d_in, d_out)`: summed counts of triples ending / starting at `node`.
    pub fn degrees(&self, node: NodeId) -> Result<(u64, u64)> {
        self.check(node)?;
        Ok((
            self.in_degree.get(&node).copied().unwrap_or(0),
            self.out_degree.get(&node).copied().unwrap_or(0),
        ))
    }

    /// Distinct nodes with at least one edge into `node`.
    pub fn in_neighbors(&self, node: NodeId) -> BTreeSet<NodeId> {
        self.incoming
            .get(&node)
            .map(|e| e.keys().map(|&(_, q)| q).collect())
            .unwrap_or_default()
    }

    /// Distinct nodes with at least one edge from `node`.
    pub fn out_neighbors(&self, node: NodeId) -> BTreeSet<NodeId> {
        self.outgoing
            .get(&node)
            .map(|e| e.keys().map(|&(_, q)| q).collect())
            .unwrap_or_default()
    }

    /// Connection sets `(L_s, L_o)` of two distinct nodes.
    ///
    /// `q` is in `L_s` when some predicate links `q` to both nodes (both as
    /// objects), and in `L_o` when some predicate links both nodes to `q`. The
    /// two nodes themselves never belong to either set.
    pub fn connection_sets(&self, a: NodeId, b: NodeId) -> Result<(BTreeSet<NodeId>, BTreeSet<NodeId>)> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Err(Error::contract(format!("connection sets of node {a} with itself")));
        }
        Ok((
            shared_neighbors(self.incoming.get(&a), self.incoming.get(&b), a, b),
            shared_neighbors(self.outgoing.get(&a), self.outgoing.get(&b), a, b),
        ))
    }

    /// Sizes `(|L_s|, |L_o|)` without materializing the sets.
    pub fn connection_sizes(&self, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (ls, lo) = self.connection_sets(a, b)?;
        Ok((ls.len(), lo.len()))
    }

    /// Replaces `i` and `j` by a fresh node, summing the counts of rewritten
    /// triples and dropping those that become self-loops. Returns the new id.
    pub fn merge_in_place(&mut self, i: NodeId, j: NodeId) -> Result<NodeId> {
        self.check(i)?;
        self.check(j)?;
        if i == j {
            return Err(Error::contract(format!("cannot merge node {i} with itself")));
        }
        let touched: Vec<(NodeId, PredicateId, NodeId)> = [i, j]
            .iter()
            .flat_map(|n| {
                let outs = self.outgoing.get(n).into_iter().flatten().map(move |(&(p, o), _)| (*n, p, o));
                let ins = self.incoming.get(n).into_iter().flatten().map(move |(&(p, s), _)| (s, p, *n));
                outs.chain(ins)
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let m = self.next_id;
        self.next_id += 1;
        let rewrite = |n: NodeId| if n == i || n == j { m } else { n };
        for (s, p, o) in touched {
            let c = self.remove(s, p, o);
            let (s2, o2) = (rewrite(s), rewrite(o));
            if s2 != o2 {
                self.add(s2, p, o2, c);
            }
        }
        for n in [i, j] {
            self.nodes.remove(&n);
            self.outgoing.remove(&n);
            self.incoming.remove(&n);
        }
        self.nodes.insert(m);
        Ok(m)
    }

    /// Non-mutating form of [`merge_in_place`](Self::merge_in_place).
    pub fn merge_nodes(&self, i: NodeId, j: NodeId) -> Result<(KnowledgeGraph, NodeId)> {
        let mut kg = self.clone();
        let m = kg.merge_in_place(i, j)?;
        Ok((kg, m))
    }
}

fn shared_neighbors(a: Option<&Edges>, b: Option<&Edges>, x: NodeId, y: NodeId) -> BTreeSet<NodeId> {
    let (Some(a), Some(b)) = (a, b) else {
        return BTreeSet::new();
    };
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small
        .keys()
        .filter(|&&(_, q)| q != x && q != y)
        .filter(|key| large.contains_key(key))
        .map(|&(_, q)| q)
        .collect()
}

/// Aggregates every ground-truth relation of the corpus into class-level triples.
pub fn build_kg(samples: &[SceneSample], vocab: &RelationVocab) -> Result<KnowledgeGraph> {
    validate_corpus(samples, vocab)?;
    let mut kg = KnowledgeGraph::empty(vocab.clone());
    for sample in samples {
        for rel in &sample.relations {
            kg.add(sample.objects[rel.subj].class, rel.pred, sample.objects[rel.obj].class, 1);
        }
    }
    Ok(kg)
}

/// What one co-occurrence count stands for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CooccurrenceUnit {
    /// Every ordered pair of distinct instances in an image adds one.
    #[default]
    InstancePairs,
    /// Every ordered class pair present in an image adds one, once per image.
    ImagePresence,
}

/// Dense `N x N` count matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub n: usize,
    pub rows: Vec<Vec<u64>>,
}

impl CountMatrix {
    pub fn zeros(n: usize) -> Self {
        CountMatrix { n, rows: vec![vec![0; n]; n] }
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.rows[i][j]
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.rows[i].iter().sum()
    }
}

/// Co-occurrence counts `T` and conditional probabilities `P[i][j] = T[i][j] / sum_j T[i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceModel<T> {
    pub counts: CountMatrix,
    pub prob: Vec<Vec<T>>,
}

impl<T: Real> CooccurrenceModel<T> {
    pub fn from_counts(counts: CountMatrix) -> Self {
        let prob = conditional_probability(&counts);
        CooccurrenceModel { counts, prob }
    }

    pub fn fit(samples: &[SceneSample], vocab: &RelationVocab, unit: CooccurrenceUnit) -> Result<Self> {
        Ok(Self::from_counts(cooccurrence_counts(samples, vocab, unit)?))
    }

    pub fn num_classes(&self) -> usize {
        self.counts.n
    }
}

pub fn cooccurrence_counts(
    samples: &[SceneSample],
    vocab: &RelationVocab,
    unit: CooccurrenceUnit,
) -> Result<CountMatrix> {
    validate_corpus(samples, vocab)?;
    let mut t = CountMatrix::zeros(vocab.num_object_classes);
    for sample in samples {
        let labels = sample.labels();
        match unit {
            CooccurrenceUnit::InstancePairs => {
                for (a, &ca) in labels.iter().enumerate() {
                    for (b, &cb) in labels.iter().enumerate() {
                        if a != b {
                            t.rows[ca][cb] += 1;
                        }
                    }
                }
            }
            CooccurrenceUnit::ImagePresence => {
                let mut multiplicity: BTreeMap<usize, usize> = BTreeMap::new();
                for &c in &labels {
                    *multiplicity.entry(c).or_default() += 1;
                }
                for (&ca, &ma) in &multiplicity {
                    for &cb in multiplicity.keys() {
                        if ca != cb || ma >= 2 {
                            t.rows[ca][cb] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Row-normalizes a count matrix; all-zero rows stay zero.
pub fn conditional_probability<T: Real>(counts: &CountMatrix) -> Vec<Vec<T>> {
    counts
        .rows
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                vec![T::zero(); row.len()]
            } else {
                let total = T::of(total as f64);
                row.iter().map(|&c| T::of(c as f64) / total).collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ObjectAnnotation, RelationAnnotation};

    const MAN: usize = 0;
    const WOMAN: usize = 1;
    const HORSE: usize = 2;
    const ELEPHANT: usize = 3;
    const RIDE: usize = 0;

    fn image(id: &str, classes: &[usize], rels: &[(usize, usize, usize)]) -> SceneSample {
        SceneSample {
            image_id: id.into(),
            width: 100,
            height: 100,
            objects: classes
                .iter()
                .map(|&class| ObjectAnnotation { class, bbox: [0.0, 0.0, 10.0, 10.0] })
                .collect(),
            relations: rels
                .iter()
                .map(|&(subj, pred, obj)| RelationAnnotation { subj, pred, obj })
                .collect(),
        }
    }

    fn toy_corpus() -> Vec<SceneSample> {
        vec![
            image("a", &[MAN, HORSE], &[(0, RIDE, 1)]),
            image("b", &[MAN, HORSE], &[(0, RIDE, 1)]),
            image("c", &[WOMAN, ELEPHANT], &[(0, RIDE, 1)]),
            image("d", &[MAN, ELEPHANT], &[(0, RIDE, 1)]),
        ]
    }

    fn toy_kg() -> KnowledgeGraph {
        build_kg(&toy_corpus(), &RelationVocab::new(4, 1)).unwrap()
    }

    #[test]
    fn build_kg_counts_class_level_triples() {
        let kg = toy_kg();
        let counts = kg.triple_counts();
        assert_eq!(counts.len(), 3);
        assert_eq!(counts[&(MAN, RIDE, HORSE)], 2);
        assert_eq!(counts[&(WOMAN, RIDE, ELEPHANT)], 1);
        assert_eq!(counts[&(MAN, RIDE, ELEPHANT)], 1);
        assert_eq!(kg.total_count(), 4);
    }

    #[test]
    fn empty_corpus_has_all_nodes_and_no_triples() {
        let kg = build_kg(&[], &RelationVocab::new(5, 2)).unwrap();
        assert!(kg.triple_counts().is_empty());
        assert_eq!(kg.nodes().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let bad = vec![image("x", &[MAN, 9], &[])];
        assert!(matches!(build_kg(&bad, &RelationVocab::new(4, 1)), Err(Error::Input(_))));
        let bad = vec![image("y", &[MAN, HORSE], &[(0, 3, 1)])];
        assert!(matches!(
            cooccurrence_counts(&bad, &RelationVocab::new(4, 1), CooccurrenceUnit::InstancePairs),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn degrees_on_toy_graph() {
        let kg = toy_kg();
        assert_eq!(kg.degrees(HORSE).unwrap(), (2, 0));
        assert_eq!(kg.degrees(MAN).unwrap(), (0, 3));
        let isolated = build_kg(&[], &RelationVocab::new(2, 1)).unwrap();
        assert_eq!(isolated.degrees(1).unwrap(), (0, 0));
        assert!(matches!(kg.degrees(17), Err(Error::Lookup(_))));
    }

    #[test]
    fn connection_sets_on_toy_graph() {
        let kg = toy_kg();
        let (ls, lo) = kg.connection_sets(HORSE, ELEPHANT).unwrap();
        assert_eq!(ls.into_iter().collect::<Vec<_>>(), vec![MAN]);
        assert!(lo.is_empty());
        let (ls, lo) = kg.connection_sets(MAN, WOMAN).unwrap();
        assert!(ls.is_empty());
        assert_eq!(lo.into_iter().collect::<Vec<_>>(), vec![ELEPHANT]);
        let empty = KnowledgeGraph::empty(RelationVocab::new(3, 1));
        let (ls, lo) = empty.connection_sets(0, 2).unwrap();
        assert!(ls.is_empty() && lo.is_empty());
        assert!(matches!(kg.connection_sets(MAN, MAN), Err(Error::Contract(_))));
    }

    #[test]
    fn connection_sets_require_the_same_predicate() {
        // 0 -p0-> 1 and 0 -p1-> 2: no shared predicate, so 0 is not a connection node.
        let kg = KnowledgeGraph::from_triples(RelationVocab::new(3, 2), [((0, 0, 1), 1), ((0, 1, 2), 1)]).unwrap();
        assert!(kg.connection_sets(1, 2).unwrap().0.is_empty());
    }

    #[test]
    fn merge_rewrites_and_sums() {
        let kg = toy_kg();
        let (merged, m) = kg.merge_nodes(MAN, WOMAN).unwrap();
        assert_eq!(m, 4);
        let counts = merged.triple_counts();
        assert_eq!(counts.len(), 2);
        assert_eq!(counts[&(m, RIDE, HORSE)], 2);
        assert_eq!(counts[&(m, RIDE, ELEPHANT)], 2);
        assert_eq!(merged.nodes().iter().copied().collect::<Vec<_>>(), vec![HORSE, ELEPHANT, m]);
        assert_eq!(merged.degrees(ELEPHANT).unwrap(), (2, 0));
    }

    #[test]
    fn merge_drops_edges_between_partners() {
        let kg = KnowledgeGraph::from_triples(
            RelationVocab::new(3, 2),
            [((0, 0, 1), 3), ((1, 1, 0), 1), ((0, 0, 2), 1), ((2, 1, 1), 2)],
        )
        .unwrap();
        let (merged, m) = kg.merge_nodes(0, 1).unwrap();
        let counts = merged.triple_counts();
        assert_eq!(counts.len(), 2);
        assert_eq!(counts[&(m, 0, 2)], 1);
        assert_eq!(counts[&(2, 1, m)], 2);
        assert_eq!(merged.total_count(), 3);
        assert_eq!(merged.degrees(m).unwrap(), (2, 1));
    }

    #[test]
    fn merging_isolated_nodes_only_changes_node_set() {
        let kg = toy_kg();
        let kg = KnowledgeGraph::from_triples(
            RelationVocab::new(6, 1),
            kg.triple_counts(),
        )
        .unwrap();
        let (merged, m) = kg.merge_nodes(4, 5).unwrap();
        assert_eq!(merged.triple_counts(), kg.triple_counts());
        assert!(merged.contains(m) && !merged.contains(4) && !merged.contains(5));
    }

    #[test]
    fn cooccurrence_ordered_instance_pairs() {
        let vocab = RelationVocab::new(4, 1);
        let t = cooccurrence_counts(&[image("a", &[MAN, HORSE], &[])], &vocab, CooccurrenceUnit::InstancePairs).unwrap();
        assert_eq!(t.get(MAN, HORSE), 1);
        assert_eq!(t.get(HORSE, MAN), 1);
        assert_eq!(t.rows.iter().flatten().sum::<u64>(), 2);

        let t = cooccurrence_counts(&[image("b", &[MAN, MAN, HORSE], &[])], &vocab, CooccurrenceUnit::InstancePairs).unwrap();
        assert_eq!(t.get(MAN, MAN), 2);
        assert_eq!(t.get(MAN, HORSE), 2);
        assert_eq!(t.get(HORSE, MAN), 2);
        assert_eq!(t.rows.iter().flatten().sum::<u64>(), 6);

        let t = cooccurrence_counts(&[image("c", &[WOMAN], &[])], &vocab, CooccurrenceUnit::InstancePairs).unwrap();
        assert_eq!(t, CountMatrix::zeros(4));
    }

    #[test]
    fn cooccurrence_image_presence() {
        let vocab = RelationVocab::new(4, 1);
        let t = cooccurrence_counts(&[image("b", &[MAN, MAN, HORSE], &[])], &vocab, CooccurrenceUnit::ImagePresence).unwrap();
        assert_eq!(t.get(MAN, MAN), 1);
        assert_eq!(t.get(MAN, HORSE), 1);
        assert_eq!(t.get(HORSE, MAN), 1);
        assert_eq!(t.get(HORSE, HORSE), 0);
    }

    #[test]
    fn conditional_probability_examples() {
        let counts = CountMatrix { n: 4, rows: vec![vec![2, 1, 1, 0], vec![0; 4], vec![0; 4], vec![0; 4]] };
        let p: Vec<Vec<f64>> = conditional_probability(&counts);
        assert_eq!(p[0], vec![0.5, 0.25, 0.25, 0.0]);
        assert_eq!(p[1], vec![0.0; 4]);

        let mut diag = CountMatrix::zeros(3);
        (0..3).for_each(|i| diag.rows[i][i] = 5);
        let p: Vec<Vec<f64>> = conditional_probability(&diag);
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
