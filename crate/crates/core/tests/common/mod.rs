//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hose::corpus::{BoxXywh, ImageFeatures, ObjectAnnotation, RelationAnnotation, SceneSample};
use hose::eval::{ImagePredictions, Prediction};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Triple = (usize, usize, usize);

/// Triple multiset as a flat list of `((s, p, o), count)`.
#[derive(Clone, Debug)]
pub struct RawGraph {
    pub n: usize,
    pub r: usize,
    pub triples: Vec<(Triple, u64)>,
}

pub fn random_graph(rng: &mut ChaCha8Rng, max_n: usize, max_triples: usize) -> RawGraph {
    let n = rng.random_range(2..=max_n);
    let r = rng.random_range(1..=4);
    let count = rng.random_range(0..=max_triples);
    let mut merged: BTreeMap<Triple, u64> = BTreeMap::new();
    for _ in 0..count {
        let t = (rng.random_range(0..n), rng.random_range(0..r), rng.random_range(0..n));
        *merged.entry(t).or_default() += rng.random_range(1..=3);
    }
    RawGraph { n, r, triples: merged.into_iter().collect() }
}

fn frac(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Similarity straight from the definition, over an explicit triple list in
/// which nodes are arbitrary ids.
pub fn similarity_oracle(triples: &[(Triple, u64)], a: usize, b: usize) -> BigRational {
    let degree = |node: usize, as_object: bool| -> u64 {
        triples
            .iter()
            .filter(|((s, _, o), _)| if as_object { *o == node } else { *s == node })
            .map(|(_, c)| *c)
            .sum()
    };
    let linked = |q: usize, p: usize, node: usize, q_is_subject: bool| {
        triples.iter().any(|((s, pp, o), c)| {
            *c > 0 && *pp == p && if q_is_subject { *s == q && *o == node } else { *s == node && *o == q }
        })
    };
    let mut nodes = BTreeSet::new();
    let mut preds = BTreeSet::new();
    for ((s, p, o), _) in triples {
        nodes.insert(*s);
        nodes.insert(*o);
        preds.insert(*p);
    }
    let mut l_s = 0u64;
    let mut l_o = 0u64;
    for &q in nodes.iter().filter(|&&q| q != a && q != b) {
        if preds.iter().any(|&p| linked(q, p, a, true) && linked(q, p, b, true)) {
            l_s += 1;
        }
        if preds.iter().any(|&p| linked(q, p, a, false) && linked(q, p, b, false)) {
            l_o += 1;
        }
    }
    let term = |shared: u64, total: u64| if shared == 0 { BigRational::zero() } else { frac(shared, total - shared) };
    term(l_s, degree(a, true) + degree(b, true)) + term(l_o, degree(a, false) + degree(b, false))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleMerge {
    pub left: usize,
    pub right: usize,
    pub id: usize,
    pub similarity: BigRational,
    pub score: BigRational,
}

/// Straightforward simulation of the penalized agglomeration. `full`
/// recomputes every similarity after a merge; otherwise only pairs with the
/// new node are refreshed.
pub fn hsa_oracle(graph: &RawGraph, k: usize, full: bool) -> (Vec<Vec<usize>>, Vec<OracleMerge>) {
    let mut triples: Vec<(Triple, u64)> = graph.triples.clone();
    // (node, members, lambda), kept ordered by smallest member.
    let mut clusters: Vec<(usize, Vec<usize>, u64)> = (0..graph.n).map(|c| (c, vec![c], 1)).collect();
    let mut table: BTreeMap<(usize, usize), BigRational> = BTreeMap::new();
    let fill = |table: &mut BTreeMap<(usize, usize), BigRational>, triples: &[(Triple, u64)], nodes: &[usize], only: Option<usize>| {
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                if only.is_none_or(|m| a == m || b == m) {
                    let key = (a.min(b), a.max(b));
                    table.insert(key, similarity_oracle(triples, a, b));
                }
            }
        }
    };
    let nodes: Vec<usize> = clusters.iter().map(|c| c.0).collect();
    fill(&mut table, &triples, &nodes, None);
    let mut merges = Vec::new();
    let mut next = graph.n;
    while clusters.len() > k {
        let mut best: Option<(usize, usize, BigRational)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let (a, b) = (clusters[i].0, clusters[j].0);
                let raw = table[&(a.min(b), a.max(b))].clone();
                let score = raw / frac(clusters[i].2 + clusters[j].2, 1);
                if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
                    best = Some((i, j, score));
                }
            }
        }
        let (i, j, score) = best.unwrap();
        let (a, b) = (clusters[i].0, clusters[j].0);
        let similarity = table[&(a.min(b), a.max(b))].clone();
        let m = next;
        next += 1;
        let mut rewritten: BTreeMap<Triple, u64> = BTreeMap::new();
        for ((s, p, o), c) in triples.drain(..) {
            let s = if s == a || s == b { m } else { s };
            let o = if o == a || o == b { m } else { o };
            if !(s == m && o == m) {
                *rewritten.entry((s, p, o)).or_default() += c;
            }
        }
        triples = rewritten.into_iter().collect();
        let removed = clusters.remove(j);
        clusters[i].0 = m;
        clusters[i].1.extend(removed.1);
        clusters[i].1.sort();
        clusters[i].2 += removed.2 + 1;
        merges.push(OracleMerge { left: a, right: b, id: m, similarity, score });
        table.retain(|&(x, y), _| x != a && x != b && y != a && y != b);
        let nodes: Vec<usize> = clusters.iter().map(|c| c.0).collect();
        if full {
            table.clear();
            fill(&mut table, &triples, &nodes, None);
        } else {
            fill(&mut table, &triples, &nodes, Some(m));
        }
    }
    (clusters.into_iter().map(|c| c.1).collect(), merges)
}

/// Random image with distinct boxes per instance.
pub fn random_image(rng: &mut ChaCha8Rng, id: &str, n_classes: usize, n_predicates: usize, max_objects: usize, d_f: usize) -> (SceneSample, ImageFeatures) {
    let n = rng.random_range(2..=max_objects);
    let objects: Vec<ObjectAnnotation> = (0..n)
        .map(|i| ObjectAnnotation {
            class: rng.random_range(0..n_classes),
            bbox: [10.0 * i as f64 + rng.random_range(0.0..5.0), rng.random_range(0.0..50.0), rng.random_range(5.0..60.0), rng.random_range(5.0..60.0)],
        })
        .collect();
    let mut relations = Vec::new();
    for s in 0..n {
        for o in (0..n).filter(|&o| o != s) {
            if rng.random_bool(0.3) {
                relations.push(RelationAnnotation { subj: s, pred: rng.random_range(1..n_predicates), obj: o });
            }
        }
    }
    let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let features = ImageFeatures {
        image_id: id.into(),
        objects: (0..n).map(|_| v(d_f)).collect(),
        pairs: (0..n * (n - 1)).map(|_| v(d_f)).collect(),
    };
    (SceneSample { image_id: id.into(), width: 200, height: 150, objects, relations }, features)
}

/// Random predictions over a random ground truth, with coarse scores so ties occur.
pub fn random_eval_instance(rng: &mut ChaCha8Rng, id: &str) -> (SceneSample, ImagePredictions) {
    let n = rng.random_range(2..=6);
    let r = rng.random_range(2..=5);
    let objects: Vec<ObjectAnnotation> = (0..n)
        .map(|i| ObjectAnnotation { class: rng.random_range(0..3), bbox: [20.0 * i as f64, 0.0, 15.0, 15.0] })
        .collect();
    let mut relations = Vec::new();
    for s in 0..n {
        for o in (0..n).filter(|&o| o != s) {
            for p in 1..r {
                if rng.random_bool(0.15) {
                    relations.push(RelationAnnotation { subj: s, pred: p, obj: o });
                }
            }
        }
    }
    let mut predictions = Vec::new();
    for s in 0..n {
        for o in (0..n).filter(|&o| o != s) {
            for p in 1..r {
                if rng.random_bool(0.8) {
                    let jitter = if rng.random_bool(0.2) { 1.0 } else { 0.0 };
                    let bbox = |i: usize| -> BoxXywh {
                        let b = objects[i].bbox;
                        [b[0] + jitter, b[1], b[2], b[3]]
                    };
                    predictions.push(Prediction {
                        subj: s,
                        obj: o,
                        predicate: p,
                        score: rng.random_range(0..8) as f64 / 8.0,
                        subj_box: bbox(s),
                        obj_box: bbox(o),
                        subj_class: if rng.random_bool(0.9) { objects[s].class } else { 3 },
                        obj_class: objects[o].class,
                    });
                }
            }
        }
    }
    let sample = SceneSample { image_id: id.into(), width: 200, height: 100, objects, relations };
    (sample, ImagePredictions { image_id: id.into(), predictions })
}

/// Recall by rank counting: a ground-truth triple is hit when some matching
/// candidate has fewer than `k` candidates ranked ahead of it.
pub fn recall_oracle(sample: &SceneSample, preds: &[Prediction], k: usize, graph_constraint: bool, iou_threshold: Option<f64>) -> Option<f64> {
    if sample.relations.is_empty() {
        return None;
    }
    let candidates: Vec<&Prediction> = if graph_constraint {
        preds
            .iter()
            .filter(|p| {
                !preds.iter().any(|q| {
                    q.subj == p.subj && q.obj == p.obj && (q.score > p.score || (q.score == p.score && q.predicate < p.predicate))
                })
            })
            .collect()
    } else {
        preds.iter().collect()
    };
    let ahead = |p: &Prediction| {
        candidates
            .iter()
            .filter(|q| q.score > p.score || (q.score == p.score && (q.subj, q.obj, q.predicate) < (p.subj, p.obj, p.predicate)))
            .count()
    };
    let iou = |a: &BoxXywh, b: &BoxXywh| {
        let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
        let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
        let inter = w.max(0.0) * h.max(0.0);
        inter / (a[2] * a[3] + b[2] * b[3] - inter)
    };
    let same = |a: &BoxXywh, b: &BoxXywh| match iou_threshold {
        None => a == b,
        Some(t) => iou(a, b) >= t,
    };
    let hits = sample
        .relations
        .iter()
        .filter(|g| {
            let (s, o) = (&sample.objects[g.subj], &sample.objects[g.obj]);
            candidates.iter().any(|p| {
                p.predicate == g.pred
                    && p.subj_class == s.class
                    && p.obj_class == o.class
                    && same(&p.subj_box, &s.bbox)
                    && same(&p.obj_box, &o.bbox)
                    && ahead(p) < k
            })
        })
        .count();
    Some(hits as f64 / sample.relations.len() as f64)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
