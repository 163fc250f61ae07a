//! Structure-aware embedding-to-classifier head.
//!
//! Object labels are mapped to context one-hots through a
//! [`ContextDictionary`], embedded, propagated over the image's co-occurrence
//! graph by a GCN, and read out as one primitive classifier per instance. The
//! classifier of a subject-object pair is the concatenation of the two
//! primitive classifiers, applied to the pair's relation and spatial features.

mod bias;
mod head;
mod model;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{BoxXywh, ClassId};
use crate::error::{Error, Result};
use crate::hsa::ContextDictionary;
use crate::scalar::Real;

pub use bias::{build_frequency_bias, fuse_bias, FrequencyBias, DEFAULT_BIAS_EPSILON};
pub use head::{Checkpoint, SecHead, CHECKPOINT_FORMAT};
pub use model::{ForwardCache, ImageInput, PairInput, PairOutput, ScoreFusion, SecModel};

/// Length of the raw spatial encoding `[b_s, b_t, b_st]`.
pub const SPATIAL_INPUT_DIM: usize = 14;

/// Elementwise nonlinearity applied after hidden GCN layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    pub fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - z.tanh() * z.tanh(),
            Activation::Identity => T::one(),
        }
    }
}

/// How the co-occurrence adjacency enters message passing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyMode {
    /// `A_ij = P[c_i][c_j]`, used as is (diagonal included).
    #[default]
    Literal,
    /// `D^-1/2 (A + I) D^-1/2` with `D` the row sums of `A + I`.
    Symmetric,
    /// `D^-1 (A + I)`: every row sums to one.
    RowNormalized,
}

fn default_feature_dim() -> usize {
    4096
}
fn default_embedding_dim() -> usize {
    512
}
fn default_relation_dim() -> usize {
    512
}
fn default_spatial_dim() -> usize {
    64
}
fn default_gcn_layers() -> usize {
    2
}

/// Dimensions and architecture of a [`SecHead`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecConfig {
    /// Region feature length `d_f`.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Context embedding length `d_e`.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Output length `d_r` of the relation projection.
    #[serde(default = "default_relation_dim")]
    pub relation_dim: usize,
    /// Output length `d_spt` of the spatial projection.
    #[serde(default = "default_spatial_dim")]
    pub spatial_dim: usize,
    /// Number of contexts `K`.
    pub num_contexts: usize,
    /// Number of predicates `R`, background included.
    pub num_predicates: usize,
    #[serde(default = "default_gcn_layers")]
    pub gcn_layers: usize,
    /// Width of hidden GCN layers; defaults to `embedding_dim`.
    #[serde(default)]
    pub gcn_hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub adjacency: AdjacencyMode,
}

impl SecConfig {
    pub fn new(num_contexts: usize, num_predicates: usize) -> Self {
        SecConfig {
            feature_dim: default_feature_dim(),
            embedding_dim: default_embedding_dim(),
            relation_dim: default_relation_dim(),
            spatial_dim: default_spatial_dim(),
            num_contexts,
            num_predicates,
            gcn_layers: default_gcn_layers(),
            gcn_hidden: None,
            activation: Activation::default(),
            adjacency: AdjacencyMode::default(),
        }
    }

    /// Composed classifier width `d_cls = d_r + d_spt`.
    pub fn classifier_dim(&self) -> usize {
        self.relation_dim + self.spatial_dim
    }

    pub fn half_dim(&self) -> usize {
        self.classifier_dim() / 2
    }

    /// Width of a primitive classifier before reshaping: `R * d_cls / 2`.
    pub fn primitive_dim(&self) -> usize {
        self.num_predicates * self.half_dim()
    }

    /// `(input, output)` sizes of each GCN weight matrix.
    pub fn gcn_shapes(&self) -> Vec<(usize, usize)> {
        let hidden = self.gcn_hidden.unwrap_or(self.embedding_dim);
        (0..self.gcn_layers)
            .map(|l| {
                let input = if l == 0 { self.embedding_dim } else { hidden };
                let output = if l + 1 == self.gcn_layers { self.primitive_dim() } else { hidden };
                (input, output)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("embedding_dim", self.embedding_dim),
            ("relation_dim", self.relation_dim),
            ("spatial_dim", self.spatial_dim),
            ("num_contexts", self.num_contexts),
            ("num_predicates", self.num_predicates),
            ("gcn_layers", self.gcn_layers),
            ("gcn_hidden", self.gcn_hidden.unwrap_or(1)),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.classifier_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "relation_dim + spatial_dim = {} must be even",
                self.classifier_dim()
            )));
        }
        Ok(())
    }
}

/// One-hot context code of `class`, length `K`.
pub fn encode_context<T: Real>(dictionary: &ContextDictionary, class: ClassId) -> Result<Array1<T>> {
    let mut v = Array1::zeros(dictionary.k());
    v[dictionary.context_of(class)?] = T::one();
    Ok(v)
}

/// Stacks one-hot codes (rows) into embeddings: row `i` is `W_e c_i`.
pub fn embed_contexts<T: Real>(context_embedding: ArrayView2<T>, one_hots: ArrayView2<T>) -> Result<Array2<T>> {
    if one_hots.ncols() != context_embedding.ncols() {
        return Err(Error::contract(format!(
            "one-hot width {} does not match embedding table with {} contexts",
            one_hots.ncols(),
            context_embedding.ncols()
        )));
    }
    Ok(one_hots.dot(&context_embedding.t()))
}

/// Row `i` is column `contexts[i]` of the embedding table.
pub fn embed_context_ids<T: Real>(context_embedding: ArrayView2<T>, contexts: &[usize]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((contexts.len(), context_embedding.nrows()));
    for (i, &k) in contexts.iter().enumerate() {
        if k >= context_embedding.ncols() {
            return Err(Error::contract(format!("context {k} outside embedding table")));
        }
        out.row_mut(i).assign(&context_embedding.column(k));
    }
    Ok(out)
}

/// Co-occurrence graph of one image's instances.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGraph<T> {
    pub labels: Vec<ClassId>,
    pub adjacency: Array2<T>,
}

impl<T: Real> LocalGraph<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Adjacency as used for message passing under `mode`.
    pub fn propagation_matrix(&self, mode: AdjacencyMode) -> Array2<T> {
        normalize_adjacency(&self.adjacency, mode)
    }
}

/// `A_ij = P[labels_i][labels_j]` for all `i, j`, diagonal included.
pub fn local_adjacency<T: Real>(prob: &[Vec<T>], labels: &[ClassId]) -> Result<LocalGraph<T>> {
    if let Some(&bad) = labels.iter().find(|&&c| c >= prob.len()) {
        return Err(Error::lookup(format!(
            "class {bad} outside the {} x {} co-occurrence matrix",
            prob.len(),
            prob.len()
        )));
    }
    let n = labels.len();
    let adjacency = Array2::from_shape_fn((n, n), |(i, j)| prob[labels[i]][labels[j]]);
    Ok(LocalGraph { labels: labels.to_vec(), adjacency })
}

pub fn normalize_adjacency<T: Real>(a: &Array2<T>, mode: AdjacencyMode) -> Array2<T> {
    match mode {
        AdjacencyMode::Literal => a.clone(),
        AdjacencyMode::Symmetric | AdjacencyMode::RowNormalized => {
            let n = a.nrows();
            let with_self = a + &Array2::eye(n);
            let deg: Vec<T> = with_self.rows().into_iter().map(|r| r.sum()).collect();
            Array2::from_shape_fn((n, n), |(i, j)| {
                let v = with_self[(i, j)];
                if mode == AdjacencyMode::Symmetric {
                    v / (deg[i] * deg[j]).sqrt()
                } else {
                    v / deg[i]
                }
            })
        }
    }
}

/// Runs the GCN: every layer maps `H` to `act(A H U_l)`, with `act` applied to
/// hidden layers only. Returns the primitive classifiers, one row per node.
pub fn gcn_forward<T: Real>(
    embeddings: ArrayView2<T>,
    adjacency: ArrayView2<T>,
    weights: &[Array2<T>],
    activation: Activation,
) -> Result<Array2<T>> {
    Ok(model::gcn_layers(embeddings, adjacency, weights, activation)?
        .pop()
        .map(|layer| layer.output)
        .unwrap_or_else(|| embeddings.to_owned()))
}

/// `R x d_cls` classifier of pair `(s, t)`: subject block left, object block
/// right, each primitive row reshaped row-major into `R x d_cls/2`.
pub fn compose_classifier<T: Real>(
    primitives: ArrayView2<T>,
    s: usize,
    t: usize,
    num_predicates: usize,
) -> Result<Array2<T>> {
    if s == t {
        return Err(Error::contract(format!("instance {s} cannot relate to itself")));
    }
    let n = primitives.nrows();
    if s >= n || t >= n {
        return Err(Error::lookup(format!("pair ({s}, {t}) outside {n} instances")));
    }
    let width = primitives.ncols();
    if num_predicates == 0 || !width.is_multiple_of(num_predicates) {
        return Err(Error::contract(format!(
            "primitive width {width} is not a multiple of {num_predicates} predicates"
        )));
    }
    let half = width / num_predicates;
    let block = |i: usize| {
        primitives
            .row(i)
            .to_owned()
            .into_shape_with_order((num_predicates, half))
            .expect("width checked above")
    };
    Ok(concatenate![Axis(1), block(s), block(t)])
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} has length {got}, expected {want}")))
    }
}

/// `[f_u; f_s; f_t]`, the input of the relation projection.
pub fn relation_input<T: Real>(union: &[T], subject: &[T], object: &[T]) -> Result<Array1<T>> {
    check_len("subject feature", subject.len(), union.len())?;
    check_len("object feature", object.len(), union.len())?;
    Ok(union.iter().chain(subject).chain(object).copied().collect())
}

/// `r_st = Psi_st [f_u; f_s; f_t]`.
pub fn relation_representation<T: Real>(
    union: &[T],
    subject: &[T],
    object: &[T],
    psi_st: ArrayView2<T>,
) -> Result<Array1<T>> {
    let x = relation_input(union, subject, object)?;
    check_len("relation input", x.len(), psi_st.ncols())?;
    Ok(psi_st.dot(&x))
}

/// Raw 14-d spatial encoding `[b_s, b_t, b_st]` of two `[x, y, w, h]` boxes.
///
/// Each `b` is `[x/W, y/H, (x+w)/W, (y+h)/H, wh/(WH)]`; the relative part is
/// `[(x_s-x_t)/w_t, (y_s-y_t)/h_t, ln(w_s/w_t), ln(h_s/h_t)]`.
pub fn spatial_encoding(subject: &BoxXywh, object: &BoxXywh, width: f64, height: f64) -> Result<[f64; SPATIAL_INPUT_DIM]> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::input(format!("image size {width} x {height} must be positive")));
    }
    for (name, b) in [("subject", subject), ("object", object)] {
        if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("{name} box {b:?} needs finite coordinates and positive size")));
        }
    }
    let normalized = |b: &BoxXywh| {
        let [x, y, w, h] = *b;
        [x / width, y / height, (x + w) / width, (y + h) / height, w * h / (width * height)]
    };
    let [xs, ys, ws, hs] = *subject;
    let [xt, yt, wt, ht] = *object;
    let mut out = [0.0; SPATIAL_INPUT_DIM];
    out[..5].copy_from_slice(&normalized(subject));
    out[5..10].copy_from_slice(&normalized(object));
    out[10..].copy_from_slice(&[(xs - xt) / wt, (ys - yt) / ht, (ws / wt).ln(), (hs / ht).ln()]);
    Ok(out)
}

/// `f_spt = Psi_spt [b_s, b_t, b_st]`.
pub fn spatial_representation<T: Real>(
    subject: &BoxXywh,
    object: &BoxXywh,
    width: f64,
    height: f64,
    psi_spt: ArrayView2<T>,
) -> Result<Array1<T>> {
    check_len("spatial projection input", psi_spt.ncols(), SPATIAL_INPUT_DIM)?;
    let raw: Array1<T> = spatial_encoding(subject, object, width, height)?.iter().map(|&v| T::of(v)).collect();
    Ok(psi_spt.dot(&raw))
}

fn classify<T: Real>(weights: ArrayView2<T>, relation: ArrayView1<T>, spatial: ArrayView1<T>) -> Result<Array1<T>> {
    check_len("classifier input", relation.len() + spatial.len(), weights.ncols())?;
    let x = concatenate![Axis(0), relation, spatial];
    Ok(weights.dot(&x))
}

/// Structured logits `W_st [r_st; f_spt]`, one per predicate.
pub fn score<T: Real>(composed: ArrayView2<T>, relation: ArrayView1<T>, spatial: ArrayView1<T>) -> Result<Array1<T>> {
    classify(composed, relation, spatial)
}

/// Logits of the unstructured branch, which shares one `R x d_cls` matrix across pairs.
pub fn flat_score<T: Real>(flat: ArrayView2<T>, relation: ArrayView1<T>, spatial: ArrayView1<T>) -> Result<Array1<T>> {
    classify(flat, relation, spatial)
}

/// Splits a `d_cls` vector into its relation and spatial parts.
pub(crate) fn split_input<T: Real>(x: ArrayView1<T>, relation_dim: usize) -> (ArrayView1<T>, ArrayView1<T>) {
    (x.slice_move(s![..relation_dim]), x.slice_move(s![relation_dim..]))
}
