use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::bias::{fuse_bias, FrequencyBias};
use super::head::{Checkpoint, SecHead};
use super::{
    compose_classifier, embed_context_ids, flat_score, local_adjacency, relation_input, score, spatial_encoding,
    split_input, Activation, SPATIAL_INPUT_DIM,
};
use crate::corpus::{ClassId, ImageFeatures, PredicateId, SceneSample, BACKGROUND_PREDICATE};
use crate::error::{Error, Result};
use crate::eval::{ImagePredictions, Prediction};
use crate::hsa::ContextDictionary;
use crate::kg::CooccurrenceModel;
use crate::scalar::Real;

/// Raw inputs of one ordered instance pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput<T> {
    pub subj: usize,
    pub obj: usize,
    /// `[f_u; f_s; f_t]`.
    pub relation_input: Array1<T>,
    /// `[b_s, b_t, b_st]`.
    pub spatial_input: Array1<T>,
}

/// Everything the head needs about one image: context ids, propagation
/// matrix, and the inputs of every ordered instance pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput<T> {
    pub image_id: String,
    pub labels: Vec<ClassId>,
    pub contexts: Vec<usize>,
    pub propagation: Array2<T>,
    /// All ordered pairs, subject-major (see [`crate::corpus::pair_index`]).
    pub pairs: Vec<PairInput<T>>,
}

impl<T: Real> ImageInput<T> {
    pub fn new(
        sample: &SceneSample,
        features: &ImageFeatures,
        dictionary: &ContextDictionary,
        prob: &[Vec<T>],
        head: &SecHead<T>,
    ) -> Result<Self> {
        let n = sample.objects.len();
        if features.objects.len() != n {
            return Err(Error::input(format!(
                "image {}: {} object feature vectors for {n} objects",
                sample.image_id,
                features.objects.len()
            )));
        }
        let d_f = head.config.feature_dim;
        let cast = |v: &[f64]| -> Result<Vec<T>> {
            if v.len() != d_f {
                return Err(Error::input(format!(
                    "image {}: feature of length {} but the head expects {d_f}",
                    sample.image_id,
                    v.len()
                )));
            }
            Ok(v.iter().map(|&x| T::of(x)).collect())
        };
        let labels = sample.labels();
        let contexts = labels.iter().map(|&c| dictionary.context_of(c)).collect::<Result<Vec<_>>>()?;
        let propagation = local_adjacency(prob, &labels)?.propagation_matrix(head.config.adjacency);
        let objects = features.objects.iter().map(|f| cast(f)).collect::<Result<Vec<_>>>()?;
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
        for s in 0..n {
            for t in (0..n).filter(|&t| t != s) {
                let union = features
                    .union(s, t)
                    .ok_or_else(|| Error::input(format!("image {}: missing union feature for pair ({s}, {t})", sample.image_id)))?;
                let (bs, bt) = (&sample.objects[s].bbox, &sample.objects[t].bbox);
                let spatial = spatial_encoding(bs, bt, sample.width as f64, sample.height as f64)
                    .map_err(|e| Error::input(format!("image {}: {e}", sample.image_id)))?;
                pairs.push(PairInput {
                    subj: s,
                    obj: t,
                    relation_input: relation_input(&cast(union)?, &objects[s], &objects[t])?,
                    spatial_input: spatial.iter().map(|&v| T::of(v)).collect(),
                });
            }
        }
        Ok(ImageInput { image_id: sample.image_id.clone(), labels, contexts, propagation, pairs })
    }

    pub fn num_instances(&self) -> usize {
        self.labels.len()
    }

    /// Index into [`pairs`](Self::pairs) of `(s, t)`.
    pub fn pair(&self, s: usize, t: usize) -> Option<usize> {
        let n = self.num_instances();
        (s != t && s < n && t < n).then(|| crate::corpus::pair_index(n, s, t))
    }
}

/// Activations of one GCN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer<T> {
    pub input: Array2<T>,
    /// `A H`.
    pub aggregated: Array2<T>,
    /// `A H U`, before the nonlinearity.
    pub pre_activation: Array2<T>,
    pub output: Array2<T>,
}

pub(crate) fn gcn_layers<T: Real>(
    embeddings: ArrayView2<T>,
    adjacency: ArrayView2<T>,
    weights: &[Array2<T>],
    activation: Activation,
) -> Result<Vec<GcnLayer<T>>> {
    let n = embeddings.nrows();
    if adjacency.dim() != (n, n) {
        return Err(Error::contract(format!("adjacency {:?} for {n} nodes", adjacency.dim())));
    }
    let mut layers: Vec<GcnLayer<T>> = Vec::with_capacity(weights.len());
    let mut h = embeddings.to_owned();
    for (l, u) in weights.iter().enumerate() {
        if u.nrows() != h.ncols() {
            return Err(Error::contract(format!(
                "GCN layer {l} expects width {} but receives {}",
                u.nrows(),
                h.ncols()
            )));
        }
        let aggregated = adjacency.dot(&h);
        let pre_activation = aggregated.dot(u);
        let output = if l + 1 == weights.len() {
            pre_activation.clone()
        } else {
            pre_activation.mapv(|z| activation.apply(z))
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite activation in GCN layer {l}")));
        }
        layers.push(GcnLayer { input: h, aggregated, pre_activation, output: output.clone() });
        h = output;
    }
    Ok(layers)
}

/// Per-image forward state reused by every pair of the image.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache<T> {
    pub embeddings: Array2<T>,
    pub layers: Vec<GcnLayer<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Primitive classifiers, one row per instance.
    pub fn primitives(&self) -> ArrayView2<'_, T> {
        self.layers.last().map(|l| l.output.view()).unwrap_or(self.embeddings.view())
    }
}

/// Both branches' logits for one pair, with the shared classifier input.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutput<T> {
    /// `[r_st; f_spt]`.
    pub input: Array1<T>,
    pub structured: Array1<T>,
    pub flat: Array1<T>,
}

impl<T: Real> SecHead<T> {
    pub fn forward_image(&self, image: &ImageInput<T>) -> Result<ForwardCache<T>> {
        let embeddings = embed_context_ids(self.context_embedding.view(), &image.contexts)?;
        let layers = gcn_layers(embeddings.view(), image.propagation.view(), &self.gcn_weights, self.config.activation)?;
        Ok(ForwardCache { embeddings, layers })
    }

    /// `[Psi_st x_rel; Psi_spt x_spt]`.
    pub fn classifier_input(&self, pair: &PairInput<T>) -> Result<Array1<T>> {
        if pair.relation_input.len() != self.psi_st.ncols() || pair.spatial_input.len() != SPATIAL_INPUT_DIM {
            return Err(Error::contract("pair input dimensions do not match the head"));
        }
        let r = self.psi_st.dot(&pair.relation_input);
        let f = self.psi_spt.dot(&pair.spatial_input);
        Ok(r.into_iter().chain(f).collect())
    }

    pub fn pair_output(&self, cache: &ForwardCache<T>, pair: &PairInput<T>) -> Result<PairOutput<T>> {
        let input = self.classifier_input(pair)?;
        let (r, f) = split_input(input.view(), self.config.relation_dim);
        let composed = compose_classifier(cache.primitives(), pair.subj, pair.obj, self.config.num_predicates)?;
        let structured = score(composed.view(), r, f)?;
        let flat = flat_score(self.flat_classifier.view(), r, f)?;
        Ok(PairOutput { input, structured, flat })
    }
}

/// Which branch scores predictions at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFusion {
    #[default]
    Structured,
    Flat,
    /// `flat * w_flat + structured * w_structured`.
    Weighted { flat: f64, structured: f64 },
}

impl ScoreFusion {
    pub fn combine<T: Real>(&self, out: &PairOutput<T>) -> Array1<T> {
        match *self {
            ScoreFusion::Structured => out.structured.clone(),
            ScoreFusion::Flat => out.flat.clone(),
            ScoreFusion::Weighted { flat, structured } => &out.flat * T::of(flat) + &out.structured * T::of(structured),
        }
    }
}

pub(crate) fn softmax<T: Real>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.fold(T::neg_infinity(), |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

/// A trained head together with the statistics it needs at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct SecModel<T> {
    pub head: SecHead<T>,
    pub dictionary: ContextDictionary,
    pub cooccurrence: Vec<Vec<T>>,
    pub bias: FrequencyBias,
}

impl<T: Real> SecModel<T> {
    pub fn new(
        head: SecHead<T>,
        dictionary: ContextDictionary,
        cooccurrence: &CooccurrenceModel<T>,
        bias: FrequencyBias,
    ) -> Result<Self> {
        if dictionary.k() != head.config.num_contexts {
            return Err(Error::config(format!(
                "dictionary has K = {} but the head has {} contexts",
                dictionary.k(),
                head.config.num_contexts
            )));
        }
        if dictionary.num_classes() != cooccurrence.num_classes() {
            return Err(Error::config("dictionary and co-occurrence model disagree on the class count"));
        }
        if bias.num_predicates != head.config.num_predicates {
            return Err(Error::config("bias table and head disagree on the predicate count"));
        }
        Ok(SecModel { head, dictionary, cooccurrence: cooccurrence.prob.clone(), bias })
    }

    pub fn image_input(&self, sample: &SceneSample, features: &ImageFeatures) -> Result<ImageInput<T>> {
        ImageInput::new(sample, features, &self.dictionary, &self.cooccurrence, &self.head)
    }

    /// Fused logits for every ordered pair of the image.
    pub fn pair_logits(&self, image: &ImageInput<T>, fusion: ScoreFusion, use_bias: bool) -> Result<Vec<Array1<T>>> {
        let cache = self.head.forward_image(image)?;
        image
            .pairs
            .iter()
            .map(|pair| {
                let out = self.head.pair_output(&cache, pair)?;
                let row = self.bias.row(image.labels[pair.subj], image.labels[pair.obj]);
                fuse_bias(&fusion.combine(&out), row, use_bias)
            })
            .collect()
    }

    /// Scores every non-background predicate of every ordered pair by its
    /// softmax probability.
    pub fn predict(
        &self,
        sample: &SceneSample,
        features: &ImageFeatures,
        fusion: ScoreFusion,
        use_bias: bool,
    ) -> Result<ImagePredictions> {
        let image = self.image_input(sample, features)?;
        let logits = self.pair_logits(&image, fusion, use_bias)?;
        let mut predictions = Vec::new();
        for (pair, l) in image.pairs.iter().zip(logits) {
            let prob = softmax(&l);
            let (s, t) = (&sample.objects[pair.subj], &sample.objects[pair.obj]);
            for (p, &v) in prob.iter().enumerate() {
                if p == BACKGROUND_PREDICATE {
                    continue;
                }
                let score = v.to_f64_lossy();
                if !score.is_finite() {
                    return Err(Error::numeric(format!("non-finite score in image {}", sample.image_id)));
                }
                predictions.push(Prediction {
                    subj: pair.subj,
                    obj: pair.obj,
                    predicate: p as PredicateId,
                    score,
                    subj_box: s.bbox,
                    obj_box: t.bbox,
                    subj_class: s.class,
                    obj_class: t.class,
                });
            }
        }
        Ok(ImagePredictions { image_id: sample.image_id.clone(), predictions })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.head, &self.dictionary, &self.cooccurrence, &self.bias)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let head = ck.head::<T>()?;
        let cooccurrence: Vec<Vec<T>> = ck.cooccurrence.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
        if cooccurrence.len() != ck.dictionary.num_classes() {
            return Err(Error::input("checkpoint co-occurrence matrix does not match its dictionary"));
        }
        Ok(SecModel { head, dictionary: ck.dictionary.clone(), cooccurrence, bias: ck.bias.clone() })
    }
}
