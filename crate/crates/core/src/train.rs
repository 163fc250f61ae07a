//! Joint training of the structured and flat branches with hand-written
//! backpropagation, plus a finite-difference gradient checker.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureStore, PredicateId, SceneSample, BACKGROUND_PREDICATE};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sec::{compose_classifier, ImageInput, SecHead, SecModel};

/// Loss weights of the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub flat: f64,
    pub structured: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        BranchWeights { flat: 0.7, structured: 0.3 }
    }
}

fn default_lr_structured() -> f64 {
    0.001
}
fn default_lr_unstructured() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    8
}
fn default_negative_ratio() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rate of the context embeddings, GCN weights and both projections.
    #[serde(default = "default_lr_structured")]
    pub lr_structured: f64,
    /// Rate of the flat classifier.
    #[serde(default = "default_lr_unstructured")]
    pub lr_unstructured: f64,
    #[serde(default)]
    pub branch_weights: BranchWeights,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Images per step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Unannotated pairs sampled per annotated relation, labelled background.
    #[serde(default = "default_negative_ratio")]
    pub negative_pair_ratio: f64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_structured: default_lr_structured(),
            lr_unstructured: default_lr_unstructured(),
            branch_weights: BranchWeights::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            negative_pair_ratio: default_negative_ratio(),
            shuffle: true,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr_structured) || !positive(self.lr_unstructured) {
            return Err(Error::config("learning rates must be positive"));
        }
        let BranchWeights { flat, structured } = self.branch_weights;
        if !(flat >= 0.0 && structured >= 0.0) || (flat + structured - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "branch weights ({flat}, {structured}) must be non-negative and sum to 1"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.negative_pair_ratio.is_finite() && self.negative_pair_ratio >= 0.0) {
            return Err(Error::config("negative pair ratio must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Mean losses of one optimization step; one JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub pairs: usize,
    pub loss_flat: f64,
    pub loss_structured: f64,
    pub loss_combined: f64,
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn pair_loss<T: Real>(logits: &Array1<T>, gt: PredicateId) -> Result<(T, Array1<T>)> {
    if gt >= logits.len() {
        return Err(Error::contract(format!("label {gt} outside {} predicates", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    let max = logits.fold(T::neg_infinity(), |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    let loss = total.ln() + max - logits[gt];
    let mut grad = exp / total;
    grad[gt] -= T::one();
    Ok((loss, grad))
}

/// A labelled ordered pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTarget {
    pub subj: usize,
    pub obj: usize,
    pub predicate: PredicateId,
}

/// One image with the pairs it contributes to a step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub image: ImageInput<T>,
    pub targets: Vec<PairTarget>,
}

impl<T: Real> TrainSample<T> {
    /// Annotated relations of `sample` as targets.
    pub fn annotated(image: ImageInput<T>, sample: &SceneSample) -> Self {
        let targets = sample
            .relations
            .iter()
            .map(|r| PairTarget { subj: r.subj, obj: r.obj, predicate: r.pred })
            .collect();
        TrainSample { image, targets }
    }
}

/// Gradients laid out like [`SecHead`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SecGradients<T> {
    pub context_embedding: Array2<T>,
    pub gcn_weights: Vec<Array2<T>>,
    pub psi_st: Array2<T>,
    pub psi_spt: Array2<T>,
    pub flat_classifier: Array2<T>,
}

impl<T: Real> SecGradients<T> {
    pub fn zeros_like(head: &SecHead<T>) -> Self {
        let z = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        SecGradients {
            context_embedding: z(&head.context_embedding),
            gcn_weights: head.gcn_weights.iter().map(z).collect(),
            psi_st: z(&head.psi_st),
            psi_spt: z(&head.psi_spt),
            flat_classifier: z(&head.flat_classifier),
        }
    }

    /// Same names and order as [`SecHead::tensors`].
    pub fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![("context_embedding".to_string(), &self.context_embedding)];
        out.extend(self.gcn_weights.iter().enumerate().map(|(l, u)| (format!("gcn.{l}"), u)));
        out.push(("psi_st".into(), &self.psi_st));
        out.push(("psi_spt".into(), &self.psi_spt));
        out.push(("flat_classifier".into(), &self.flat_classifier));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![&mut self.context_embedding];
        out.extend(self.gcn_weights.iter_mut());
        out.push(&mut self.psi_st);
        out.push(&mut self.psi_spt);
        out.push(&mut self.flat_classifier);
        out
    }

    pub fn add_assign(&mut self, other: &SecGradients<T>) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Summed losses of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub flat: f64,
    pub structured: f64,
    pub pairs: usize,
}

impl BatchLoss {
    fn add(self, other: BatchLoss) -> BatchLoss {
        BatchLoss {
            flat: self.flat + other.flat,
            structured: self.structured + other.structured,
            pairs: self.pairs + other.pairs,
        }
    }

    pub fn combined(&self, weights: BranchWeights) -> f64 {
        weights.flat * self.flat + weights.structured * self.structured
    }
}

fn sample_backward<T: Real>(
    head: &SecHead<T>,
    sample: &TrainSample<T>,
    weights: BranchWeights,
) -> Result<(SecGradients<T>, BatchLoss)> {
    let config = &head.config;
    let (w_flat, w_struct) = (T::of(weights.flat), T::of(weights.structured));
    let (d_r, half, r) = (config.relation_dim, config.half_dim(), config.num_predicates);
    let cache = head.forward_image(&sample.image)?;
    let mut grads = SecGradients::zeros_like(head);
    let mut loss = BatchLoss::default();
    let mut d_prim: Array2<T> = Array2::zeros(cache.primitives().raw_dim());

    for target in &sample.targets {
        let idx = sample.image.pair(target.subj, target.obj).ok_or_else(|| {
            Error::contract(format!(
                "image {}: pair ({}, {}) does not exist",
                sample.image.image_id, target.subj, target.obj
            ))
        })?;
        let pair = &sample.image.pairs[idx];
        let out = head.pair_output(&cache, pair)?;
        let (l_flat, g_flat) = pair_loss(&out.flat, target.predicate)?;
        let (l_struct, g_struct) = pair_loss(&out.structured, target.predicate)?;
        loss = loss.add(BatchLoss { flat: l_flat.to_f64_lossy(), structured: l_struct.to_f64_lossy(), pairs: 1 });

        let dz_flat = g_flat * w_flat;
        let dz_struct = g_struct * w_struct;
        let x = out.input.view().insert_axis(Axis(0));
        grads.flat_classifier += &dz_flat.view().insert_axis(Axis(1)).dot(&x);

        let composed = compose_classifier(cache.primitives(), pair.subj, pair.obj, r)?;
        let dw_st = dz_struct.view().insert_axis(Axis(1)).dot(&x);
        for p in 0..r {
            for c in 0..half {
                d_prim[[pair.subj, p * half + c]] += dw_st[[p, c]];
                d_prim[[pair.obj, p * half + c]] += dw_st[[p, half + c]];
            }
        }

        let dx = head.flat_classifier.t().dot(&dz_flat) + composed.t().dot(&dz_struct);
        let (dr, dfspt) = dx.view().split_at(Axis(0), d_r);
        grads.psi_st += &dr.insert_axis(Axis(1)).dot(&pair.relation_input.view().insert_axis(Axis(0)));
        grads.psi_spt += &dfspt.insert_axis(Axis(1)).dot(&pair.spatial_input.view().insert_axis(Axis(0)));
    }

    let a = &sample.image.propagation;
    let last = cache.layers.len().saturating_sub(1);
    let mut upstream = d_prim;
    for (l, layer) in cache.layers.iter().enumerate().rev() {
        let dz = if l == last {
            upstream
        } else {
            &upstream * &layer.pre_activation.mapv(|z| config.activation.derivative(z))
        };
        grads.gcn_weights[l] = layer.aggregated.t().dot(&dz);
        upstream = a.t().dot(&dz.dot(&head.gcn_weights[l].t()));
    }
    for (i, &k) in sample.image.contexts.iter().enumerate() {
        let mut col = grads.context_embedding.column_mut(k);
        col += &upstream.row(i);
    }
    Ok((grads, loss))
}

/// Gradients of the summed weighted loss over every target of the batch.
/// Samples are differentiated in parallel and reduced in batch order.
pub fn backward<T: Real>(
    head: &SecHead<T>,
    batch: &[TrainSample<T>],
    weights: BranchWeights,
) -> Result<(SecGradients<T>, BatchLoss)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let parts = batch
        .par_iter()
        .map(|s| sample_backward(head, s, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = SecGradients::zeros_like(head);
    let mut loss = BatchLoss::default();
    for (g, l) in &parts {
        grads.add_assign(g);
        loss = loss.add(*l);
    }
    for (name, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
    }
    Ok((grads, loss))
}

/// Summed losses without gradients.
pub fn batch_loss<T: Real>(head: &SecHead<T>, batch: &[TrainSample<T>]) -> Result<BatchLoss> {
    let mut total = BatchLoss::default();
    for sample in batch {
        let cache = head.forward_image(&sample.image)?;
        for target in &sample.targets {
            let idx = sample
                .image
                .pair(target.subj, target.obj)
                .ok_or_else(|| Error::contract(format!("pair ({}, {}) does not exist", target.subj, target.obj)))?;
            let out = head.pair_output(&cache, &sample.image.pairs[idx])?;
            let (lf, _) = pair_loss(&out.flat, target.predicate)?;
            let (ls, _) = pair_loss(&out.structured, target.predicate)?;
            total = total.add(BatchLoss { flat: lf.to_f64_lossy(), structured: ls.to_f64_lossy(), pairs: 1 });
        }
    }
    Ok(total)
}

struct Optimizer<T> {
    lr_structured: T,
    lr_unstructured: T,
    momentum: T,
    velocity: Option<SecGradients<T>>,
}

impl<T: Real> Optimizer<T> {
    fn new(config: &TrainConfig) -> Self {
        Optimizer {
            lr_structured: T::of(config.lr_structured),
            lr_unstructured: T::of(config.lr_unstructured),
            momentum: T::of(config.momentum),
            velocity: None,
        }
    }

    fn step(&mut self, head: &mut SecHead<T>, grads: SecGradients<T>, scale: T) {
        let mut grads = grads;
        for t in grads.tensors_mut() {
            t.mapv_inplace(|v| v * scale);
        }
        if self.momentum > T::zero() {
            let velocity = match self.velocity.take() {
                Some(mut v) => {
                    for (a, (_, g)) in v.tensors_mut().into_iter().zip(grads.tensors()) {
                        a.zip_mut_with(g, |a, &g| *a = *a * self.momentum + g);
                    }
                    v
                }
                None => grads,
            };
            grads = velocity.clone();
            self.velocity = Some(velocity);
        }
        let count = grads.tensors().len();
        for (i, ((_, param), (_, g))) in head.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let lr = if i + 1 == count { self.lr_unstructured } else { self.lr_structured };
            param.zip_mut_with(g, |p, &g| *p -= lr * g);
        }
    }
}

fn sample_negatives<R: Rng>(sample: &SceneSample, ratio: f64, rng: &mut R) -> Vec<PairTarget> {
    let n = sample.objects.len();
    let annotated: BTreeSet<(usize, usize)> = sample.relations.iter().map(|r| (r.subj, r.obj)).collect();
    let free: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).map(move |t| (s, t)))
        .filter(|&(s, t)| s != t && !annotated.contains(&(s, t)))
        .collect();
    let want = ((sample.relations.len() as f64) * ratio).round() as usize;
    free.choose_multiple(rng, want.min(free.len()))
        .map(|&(subj, obj)| PairTarget { subj, obj, predicate: BACKGROUND_PREDICATE })
        .collect()
}

/// Trains `model.head` in place and returns one report per step.
///
/// Each epoch visits the images (shuffled if configured), pairs every
/// annotated relation with freshly sampled background pairs, and takes one
/// SGD step per `batch_size` images on the mean pair loss.
pub fn train<T: Real>(
    model: &mut SecModel<T>,
    corpus: &[SceneSample],
    features: &FeatureStore,
    config: &TrainConfig,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let mut images = Vec::new();
    for sample in corpus.iter().filter(|s| !s.relations.is_empty()) {
        let f = features
            .get(&sample.image_id)
            .ok_or_else(|| Error::lookup(format!("no features for image {}", sample.image_id)))?;
        images.push((sample, model.image_input(sample, f)?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config);
    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainSample<T>> = chunk
                .iter()
                .map(|&i| {
                    let (sample, image) = &images[i];
                    let mut s = TrainSample::annotated(image.clone(), sample);
                    s.targets.extend(sample_negatives(sample, config.negative_pair_ratio, &mut rng));
                    s
                })
                .collect();
            let step = reports.len();
            let (grads, loss) = backward(&model.head, &batch, config.branch_weights)
                .map_err(|e| Error::numeric(format!("step {step}: {e}")))?;
            let pairs = loss.pairs as f64;
            let report = LossReport {
                epoch,
                step,
                pairs: loss.pairs,
                loss_flat: loss.flat / pairs,
                loss_structured: loss.structured / pairs,
                loss_combined: loss.combined(config.branch_weights) / pairs,
            };
            if !report.loss_combined.is_finite() {
                return Err(Error::numeric(format!("training diverged at step {step}: non-finite loss")));
            }
            optimizer.step(&mut model.head, grads, T::one() / T::of(pairs));
            if !model.head.is_finite() {
                return Err(Error::numeric(format!("training diverged at step {step}: non-finite parameters")));
            }
            reports.push(report);
        }
    }
    Ok(reports)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Number of parameter entries probed.
    pub samples: usize,
    /// Central difference step.
    pub step: f64,
    /// Denominator floor of the relative error. Central differences at step
    /// 1e-4 carry about 1e-11 of rounding noise, so entries far below the
    /// floor are compared absolutely.
    pub floor: f64,
    pub seed: u64,
    pub weights: BranchWeights,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { samples: 200, step: 1e-4, floor: 1e-4, seed: 0, weights: BranchWeights::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients with central finite differences on a random
/// subsample of parameter entries.
pub fn grad_check(head: &SecHead<f64>, batch: &[TrainSample<f64>], config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (grads, _) = backward(head, batch, config.weights)?;
    let sizes: Vec<usize> = head.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picks: BTreeSet<usize> = rand::seq::index::sample(&mut rng, total, config.samples.min(total)).into_iter().collect();
    let objective = |h: &SecHead<f64>| -> Result<f64> { Ok(batch_loss(h, batch)?.combined(config.weights)) };

    let mut probe = head.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, worst: None };
    for flat in picks {
        let (mut tensor, mut offset) = (0, flat);
        while offset >= sizes[tensor] {
            offset -= sizes[tensor];
            tensor += 1;
        }
        let (name, analytic) = {
            let (name, g) = &grads.tensors()[tensor];
            (name.clone(), g.iter().nth(offset).copied().expect("offset within tensor"))
        };
        let set = |h: &mut SecHead<f64>, v: f64| {
            let mut ts = h.tensors_mut();
            *ts[tensor].1.iter_mut().nth(offset).expect("offset within tensor") = v;
        };
        let original = head.tensors()[tensor].1.iter().nth(offset).copied().expect("offset within tensor");
        set(&mut probe, original + config.step);
        let plus = objective(&probe)?;
        set(&mut probe, original - config.step);
        let minus = objective(&probe)?;
        set(&mut probe, original);
        let numeric = (plus - minus) / (2.0 * config.step);
        let err = relative_error(analytic, numeric, config.floor);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((name, offset));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ObjectAnnotation, RelationAnnotation, RelationVocab};
    use crate::hsa::ContextDictionary;
    use crate::kg::{CooccurrenceModel, CooccurrenceUnit};
    use crate::sec::{build_frequency_bias, Activation, SecConfig};
    use crate::corpus::ImageFeatures;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    const CLASSES: usize = 4;
    const PREDICATES: usize = 3;

    fn small_config(activation: Activation) -> SecConfig {
        SecConfig {
            feature_dim: 3,
            embedding_dim: 4,
            relation_dim: 4,
            spatial_dim: 2,
            gcn_layers: 2,
            gcn_hidden: Some(5),
            activation,
            ..SecConfig::new(2, PREDICATES)
        }
    }

    fn scene(seed: u64, id: &str) -> (SceneSample, ImageFeatures) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let objects: Vec<ObjectAnnotation> = (0..n)
            .map(|_| ObjectAnnotation {
                class: rng.random_range(0..CLASSES),
                bbox: [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(5.0..40.0), rng.random_range(5.0..40.0)],
            })
            .collect();
        let relations = vec![
            RelationAnnotation { subj: 0, pred: 1, obj: 1 },
            RelationAnnotation { subj: 2, pred: 2, obj: 0 },
        ];
        let sample = SceneSample { image_id: id.into(), width: 100, height: 100, objects, relations };
        let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let features = ImageFeatures {
            image_id: id.into(),
            objects: (0..n).map(|_| v(3)).collect(),
            pairs: (0..n * (n - 1)).map(|_| v(3)).collect(),
        };
        (sample, features)
    }

    fn model(config: SecConfig, corpus: &[SceneSample]) -> SecModel<f64> {
        let vocab = RelationVocab::new(CLASSES, PREDICATES);
        let dictionary = ContextDictionary::new(2, vec![0, 0, 1, 1]).unwrap();
        let co = CooccurrenceModel::fit(corpus, &vocab, CooccurrenceUnit::InstancePairs).unwrap();
        let bias = build_frequency_bias(corpus, &vocab, 1e-3).unwrap();
        SecModel::new(SecHead::init(config, 7).unwrap(), dictionary, &co, bias).unwrap()
    }

    fn batch(model: &SecModel<f64>, seeds: &[u64]) -> Vec<TrainSample<f64>> {
        seeds
            .iter()
            .map(|&s| {
                let (sample, f) = scene(s, &format!("img{s}"));
                let mut t = TrainSample::annotated(model.image_input(&sample, &f).unwrap(), &sample);
                t.targets.push(PairTarget { subj: 1, obj: 2, predicate: BACKGROUND_PREDICATE });
                t
            })
            .collect()
    }

    #[test]
    fn pair_loss_examples() {
        let (l, g) = pair_loss(&array![0.5, 0.5, 0.5, 0.5], 1).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(g, array![0.25, -0.75, 0.25, 0.25], epsilon = 1e-15);

        let (l, _) = pair_loss(&array![0.0, 60.0, 0.0], 1).unwrap();
        assert!(l < 1e-25);

        let (l, g) = pair_loss(&array![1.0, 2.0, 3.0], 2).unwrap();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert_abs_diff_eq!(l, -(3f64.exp() / z).ln(), epsilon = 1e-14);
        let want = array![1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z - 1.0];
        assert_abs_diff_eq!(g, want, epsilon = 1e-15);

        assert!(matches!(pair_loss(&array![f64::NAN, 0.0], 0), Err(Error::Numeric(_))));
        assert!(pair_loss(&array![0.0, 0.0], 2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (activation, tol) in [(Activation::Relu, 1e-4), (Activation::Tanh, 1e-4), (Activation::Identity, 1e-7)] {
            let (s, _) = scene(1, "img1");
            let m = model(small_config(activation), &[s]);
            let b = batch(&m, &[1, 2]);
            let report = grad_check(&m.head, &b, &GradCheckConfig { samples: 400, ..Default::default() }).unwrap();
            assert!(report.max_relative_error <= tol, "{activation:?}: {report:?}");
            assert_eq!(report.checked, m.head.num_parameters().min(400));
        }
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let (s, _) = scene(1, "img1");
        let m = model(small_config(Activation::Relu), &[s]);
        let one = batch(&m, &[3]);
        let two = vec![one[0].clone(), one[0].clone()];
        let (g1, l1) = backward(&m.head, &one, BranchWeights::default()).unwrap();
        let (g2, l2) = backward(&m.head, &two, BranchWeights::default()).unwrap();
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            assert_eq!(&(a * 2.0), b);
        }
        assert_eq!(l2.pairs, 2 * l1.pairs);
    }

    #[test]
    fn zero_flat_weight_zeroes_flat_gradient() {
        let (s, _) = scene(1, "img1");
        let m = model(small_config(Activation::Relu), &[s]);
        let b = batch(&m, &[4]);
        let (g, _) = backward(&m.head, &b, BranchWeights { flat: 0.0, structured: 1.0 }).unwrap();
        assert!(g.flat_classifier.iter().all(|&v| v == 0.0));
        let (g, _) = backward(&m.head, &b, BranchWeights { flat: 1.0, structured: 0.0 }).unwrap();
        assert!(g.context_embedding.iter().all(|&v| v == 0.0));
        assert!(g.gcn_weights.iter().all(|u| u.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn empty_batch_rejected() {
        let (s, _) = scene(1, "img1");
        let m = model(small_config(Activation::Relu), &[s]);
        assert!(backward(&m.head, &[], BranchWeights::default()).is_err());
    }

    #[test]
    fn relative_error_self_consistency() {
        assert_eq!(relative_error(0.3, 0.3, 1e-6), 0.0);
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_abs_diff_eq!(relative_error(1.0, 1.1, 1e-6), 0.1 / 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3, epsilon = 1e-15);
    }

    fn fixture() -> (Vec<SceneSample>, FeatureStore) {
        let (s, f) = scene(5, "only");
        (vec![s], FeatureStore::from_records(vec![f]).unwrap())
    }

    #[test]
    fn zero_epochs_leave_head_unchanged() {
        let (corpus, features) = fixture();
        let mut m = model(small_config(Activation::Relu), &corpus);
        let before = m.head.clone();
        let reports = train(&mut m, &corpus, &features, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(reports.is_empty());
        assert_eq!(m.head, before);
    }

    #[test]
    fn repeated_sample_loss_decreases() {
        let (corpus, features) = fixture();
        let mut m = model(small_config(Activation::Relu), &corpus);
        let config = TrainConfig { epochs: 6, negative_pair_ratio: 0.0, ..Default::default() };
        let reports = train(&mut m, &corpus, &features, &config).unwrap();
        assert_eq!(reports.len(), 6);
        for w in reports.windows(2).take(5) {
            assert!(w[1].loss_combined < w[0].loss_combined, "{reports:?}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, features) = fixture();
        let config = TrainConfig { epochs: 3, momentum: 0.5, ..Default::default() };
        let run = || {
            let mut m = model(small_config(Activation::Relu), &corpus);
            let r = train(&mut m, &corpus, &features, &config).unwrap();
            (m.head, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn flat_only_weights_leave_structure_untouched() {
        let (corpus, features) = fixture();
        let mut m = model(small_config(Activation::Relu), &corpus);
        let before = m.head.clone();
        let config = TrainConfig { epochs: 2, branch_weights: BranchWeights { flat: 1.0, structured: 0.0 }, ..Default::default() };
        let reports = train(&mut m, &corpus, &features, &config).unwrap();
        assert_eq!(m.head.gcn_weights, before.gcn_weights);
        assert_eq!(m.head.context_embedding, before.context_embedding);
        assert!(reports.iter().all(|r| r.loss_combined == r.loss_flat));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { lr_structured: 0.0, ..Default::default() },
            TrainConfig { branch_weights: BranchWeights { flat: 0.5, structured: 0.6 }, ..Default::default() },
            TrainConfig { branch_weights: BranchWeights { flat: -0.5, structured: 1.5 }, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
