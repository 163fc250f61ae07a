use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{validate_corpus, ClassId, RelationVocab, SceneSample};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_BIAS_EPSILON: f64 = 1e-3;

/// Smoothed log-frequency of each predicate given the (subject, object) class pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "BiasRepr", from = "BiasRepr")]
pub struct FrequencyBias {
    pub num_predicates: usize,
    pub epsilon: f64,
    /// Rows for class pairs seen at least once; others use the uniform row.
    pub rows: BTreeMap<(ClassId, ClassId), Vec<f64>>,
    uniform: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BiasRow {
    subj: ClassId,
    obj: ClassId,
    log_prob: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BiasRepr {
    num_predicates: usize,
    epsilon: f64,
    rows: Vec<BiasRow>,
}

impl From<FrequencyBias> for BiasRepr {
    fn from(b: FrequencyBias) -> Self {
        BiasRepr {
            num_predicates: b.num_predicates,
            epsilon: b.epsilon,
            rows: b
                .rows
                .into_iter()
                .map(|((subj, obj), log_prob)| BiasRow { subj, obj, log_prob })
                .collect(),
        }
    }
}

impl From<BiasRepr> for FrequencyBias {
    fn from(r: BiasRepr) -> Self {
        FrequencyBias {
            num_predicates: r.num_predicates,
            epsilon: r.epsilon,
            rows: r.rows.into_iter().map(|row| ((row.subj, row.obj), row.log_prob)).collect(),
            uniform: uniform_row(r.num_predicates),
        }
    }
}

impl FrequencyBias {
    pub fn uniform(num_predicates: usize) -> Self {
        FrequencyBias {
            num_predicates,
            epsilon: DEFAULT_BIAS_EPSILON,
            rows: BTreeMap::new(),
            uniform: uniform_row(num_predicates),
        }
    }

    pub fn row(&self, subject: ClassId, object: ClassId) -> &[f64] {
        self.rows.get(&(subject, object)).unwrap_or(&self.uniform)
    }
}

fn uniform_row(r: usize) -> Vec<f64> {
    vec![(1.0 / r as f64).ln(); r]
}

/// `bias[(s, o)][p] = ln((n(s,p,o) + eps) / (sum_p' n(s,p',o) + R eps))`.
pub fn build_frequency_bias(samples: &[SceneSample], vocab: &RelationVocab, epsilon: f64) -> Result<FrequencyBias> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("bias epsilon {epsilon} must be positive")));
    }
    validate_corpus(samples, vocab)?;
    let r = vocab.num_predicates;
    let mut counts: BTreeMap<(ClassId, ClassId), Vec<u64>> = BTreeMap::new();
    for sample in samples {
        for rel in &sample.relations {
            let key = (sample.objects[rel.subj].class, sample.objects[rel.obj].class);
            counts.entry(key).or_insert_with(|| vec![0; r])[rel.pred] += 1;
        }
    }
    let rows = counts
        .into_iter()
        .map(|(key, c)| {
            let total = c.iter().sum::<u64>() as f64 + r as f64 * epsilon;
            (key, c.iter().map(|&n| ((n as f64 + epsilon) / total).ln()).collect())
        })
        .collect();
    Ok(FrequencyBias { num_predicates: r, epsilon, rows, uniform: uniform_row(r) })
}

/// Adds the bias row to the logits when `enabled`.
pub fn fuse_bias<T: Real>(logits: &Array1<T>, bias_row: &[f64], enabled: bool) -> Result<Array1<T>> {
    if !enabled {
        return Ok(logits.clone());
    }
    if bias_row.len() != logits.len() {
        return Err(Error::contract(format!(
            "bias row of length {} for {} logits",
            bias_row.len(),
            logits.len()
        )));
    }
    Ok(logits.iter().zip(bias_row).map(|(&l, &b)| l + T::of(b)).collect())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::corpus::{ObjectAnnotation, RelationAnnotation};

    fn sample(triples: &[(usize, usize, usize)]) -> SceneSample {
        let mut objects = Vec::new();
        let mut relations = Vec::new();
        for &(s, p, o) in triples {
            objects.push(ObjectAnnotation { class: s, bbox: [0.0, 0.0, 1.0, 1.0] });
            objects.push(ObjectAnnotation { class: o, bbox: [0.0, 0.0, 1.0, 1.0] });
            relations.push(RelationAnnotation { subj: objects.len() - 2, pred: p, obj: objects.len() - 1 });
        }
        SceneSample { image_id: "x".into(), width: 10, height: 10, objects, relations }
    }

    #[test]
    fn unseen_pair_is_uniform() {
        let bias = build_frequency_bias(&[], &RelationVocab::new(3, 4), 1e-3).unwrap();
        for v in bias.row(0, 2) {
            assert_abs_diff_eq!(*v, (0.25f64).ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn toy_counts_match_hand_formula() {
        // (0 -1-> 1) twice, (0 -2-> 1) once, (2 -1-> 1) once; R = 3.
        let s = sample(&[(0, 1, 1), (0, 1, 1), (0, 2, 1), (2, 1, 1)]);
        let eps = 1e-3;
        let bias = build_frequency_bias(&[s], &RelationVocab::new(3, 3), eps).unwrap();
        let denom = 3.0 + 3.0 * eps;
        let row = bias.row(0, 1);
        assert_abs_diff_eq!(row[0], (eps / denom).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(row[1], ((2.0 + eps) / denom).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(row[2], ((1.0 + eps) / denom).ln(), epsilon = 1e-12);
        let row = bias.row(2, 1);
        assert_abs_diff_eq!(row[1], ((1.0 + eps) / (1.0 + 3.0 * eps)).ln(), epsilon = 1e-12);
        let total: f64 = bias.row(0, 1).iter().map(|v| v.exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_predicate_dominates_as_epsilon_shrinks() {
        let s = sample(&[(0, 2, 1)]);
        let bias = build_frequency_bias(&[s], &RelationVocab::new(2, 4), 1e-9).unwrap();
        let row = bias.row(0, 1);
        assert!(row[2] > -1e-8);
        assert!(row.iter().enumerate().all(|(p, &v)| p == 2 || v < -15.0));
        assert!(build_frequency_bias(&[], &RelationVocab::new(2, 4), 0.0).is_err());
    }

    #[test]
    fn fuse_examples() {
        let logits = array![1.0, 2.0, 0.5];
        assert_eq!(fuse_bias(&logits, &[9.0, 9.0, 9.0], false).unwrap(), logits);
        assert_eq!(fuse_bias(&logits, &[0.0; 3], true).unwrap(), logits);
        // argmax flips from 1 to 2 under a skewed bias.
        let fused = fuse_bias(&logits, &[0.0, -3.0, 0.0], true).unwrap();
        assert_eq!(fused, array![1.0, -1.0, 0.5]);
        let argmax = |v: &Array1<f64>| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        assert_eq!(argmax(&logits), 1);
        assert_eq!(argmax(&fused), 0);
    }
}
