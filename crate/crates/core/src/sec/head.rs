use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bias::FrequencyBias;
use super::{SecConfig, SPATIAL_INPUT_DIM};
use crate::error::{Error, Result};
use crate::hsa::ContextDictionary;
use crate::scalar::Real;

/// Learnable parameters of the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct SecHead<T> {
    pub config: SecConfig,
    pub seed: u64,
    /// `W_e`, `d_e x K`.
    pub context_embedding: Array2<T>,
    /// `U_l`, applied on the right of the node-feature matrix.
    pub gcn_weights: Vec<Array2<T>>,
    /// `Psi_st`, `d_r x 3 d_f`.
    pub psi_st: Array2<T>,
    /// `Psi_spt`, `d_spt x 14`.
    pub psi_spt: Array2<T>,
    /// Unstructured branch, `R x d_cls`.
    pub flat_classifier: Array2<T>,
}

fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-bound..=bound)))
}

impl<T: Real> SecHead<T> {
    /// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(config: SecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context_embedding = uniform_init(&mut rng, config.embedding_dim, config.num_contexts, config.num_contexts);
        let gcn_weights = config
            .gcn_shapes()
            .into_iter()
            .map(|(i, o)| uniform_init(&mut rng, i, o, i))
            .collect();
        let psi_st = uniform_init(&mut rng, config.relation_dim, 3 * config.feature_dim, 3 * config.feature_dim);
        let psi_spt = uniform_init(&mut rng, config.spatial_dim, SPATIAL_INPUT_DIM, SPATIAL_INPUT_DIM);
        let d_cls = config.classifier_dim();
        let flat_classifier = uniform_init(&mut rng, config.num_predicates, d_cls, d_cls);
        Ok(SecHead { config, seed, context_embedding, gcn_weights, psi_st, psi_spt, flat_classifier })
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![("context_embedding".to_string(), &self.context_embedding)];
        out.extend(self.gcn_weights.iter().enumerate().map(|(l, u)| (format!("gcn.{l}"), u)));
        out.push(("psi_st".into(), &self.psi_st));
        out.push(("psi_spt".into(), &self.psi_spt));
        out.push(("flat_classifier".into(), &self.flat_classifier));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out = vec![("context_embedding".to_string(), &mut self.context_embedding)];
        out.extend(self.gcn_weights.iter_mut().enumerate().map(|(l, u)| (format!("gcn.{l}"), u)));
        out.push(("psi_st".into(), &mut self.psi_st));
        out.push(("psi_spt".into(), &mut self.psi_spt));
        out.push(("flat_classifier".into(), &mut self.flat_classifier));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Real>(&self) -> SecHead<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64_lossy()));
        SecHead {
            config: self.config.clone(),
            seed: self.seed,
            context_embedding: c(&self.context_embedding),
            gcn_weights: self.gcn_weights.iter().map(c).collect(),
            psi_st: c(&self.psi_st),
            psi_spt: c(&self.psi_spt),
            flat_classifier: c(&self.flat_classifier),
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "hose-sec-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Dense matrix with its shape, values row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRepr {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorRepr {
    fn of<T: Real>(a: &Array2<T>) -> Self {
        TensorRepr {
            shape: [a.nrows(), a.ncols()],
            data: a.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    fn to_array<T: Real>(&self, name: &str, expected: (usize, usize)) -> Result<Array2<T>> {
        if (self.shape[0], self.shape[1]) != expected {
            return Err(Error::input(format!(
                "checkpoint tensor {name} has shape {:?}, expected {expected:?}",
                self.shape
            )));
        }
        Array2::from_shape_vec(expected, self.data.iter().map(|&v| T::of(v)).collect())
            .map_err(|e| Error::input(format!("checkpoint tensor {name}: {e}")))
    }
}

/// Self-describing container for a trained model: configuration, seed,
/// context dictionary, co-occurrence probabilities, bias table and every
/// parameter matrix with its dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: SecConfig,
    pub dictionary: ContextDictionary,
    pub cooccurrence: Vec<Vec<f64>>,
    pub bias: FrequencyBias,
    pub tensors: BTreeMap<String, TensorRepr>,
}

impl Checkpoint {
    pub(crate) fn new<T: Real>(
        head: &SecHead<T>,
        dictionary: &ContextDictionary,
        cooccurrence: &[Vec<T>],
        bias: &FrequencyBias,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: head.seed,
            config: head.config.clone(),
            dictionary: dictionary.clone(),
            cooccurrence: cooccurrence.iter().map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect(),
            bias: bias.clone(),
            tensors: head.tensors().into_iter().map(|(n, t)| (n, TensorRepr::of(t))).collect(),
        }
    }

    pub(crate) fn head<T: Real>(&self) -> Result<SecHead<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        // Shapes come from a freshly initialized head of the same config.
        let mut head = SecHead::<T>::init(self.config.clone(), self.seed)?;
        for (name, tensor) in head.tensors_mut() {
            let repr = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::input(format!("checkpoint is missing tensor {name}")))?;
            *tensor = repr.to_array(&name, tensor.dim())?;
        }
        if self.tensors.len() != head.tensors().len() {
            return Err(Error::input("checkpoint has unexpected extra tensors"));
        }
        Ok(head)
    }
}
