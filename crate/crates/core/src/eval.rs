//! Recall@K over ranked relation predictions, with and without the graph
//! constraint.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{BoxXywh, ClassId, PredicateId, SceneSample};
use crate::error::{Error, Result};

/// One scored relation hypothesis between two instances of an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subj: usize,
    pub obj: usize,
    pub predicate: PredicateId,
    pub score: f64,
    pub subj_box: BoxXywh,
    pub obj_box: BoxXywh,
    pub subj_class: ClassId,
    pub obj_class: ClassId,
}

/// Predictions of one image; one JSON-lines record in prediction files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Ground-truth boxes and labels given; predict predicates.
    #[default]
    Prdcls,
    /// Ground-truth boxes given; labels come with the predictions.
    Sgcls,
    /// Boxes, labels and predicates all predicted; boxes match by IoU.
    Sgdet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// Only the best predicate of each subject-object pair is ranked.
    #[default]
    GraphConstraint,
    /// Every predicate of every pair is ranked.
    NoConstraint,
}

fn default_ks() -> Vec<usize> {
    vec![50, 100]
}

fn default_iou() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub mode: ConstraintMode,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    /// In no-constraint mode, at most this many predicates per pair enter the
    /// ranking (highest scores first).
    #[serde(default)]
    pub per_pair_cap: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: default_ks(),
            mode: ConstraintMode::default(),
            task: Task::default(),
            iou_threshold: default_iou(),
            per_pair_cap: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("recall cutoffs k must be positive"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config(format!("IoU threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.per_pair_cap == Some(0) {
            return Err(Error::config("per-pair cap must be positive"));
        }
        Ok(())
    }
}

/// A ground-truth relation resolved to classes and boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTriple {
    pub subj_box: BoxXywh,
    pub obj_box: BoxXywh,
    pub subj_class: ClassId,
    pub obj_class: ClassId,
    pub predicate: PredicateId,
}

pub fn gt_triples(sample: &SceneSample) -> Vec<GtTriple> {
    sample
        .relations
        .iter()
        .map(|r| {
            let (s, o) = (&sample.objects[r.subj], &sample.objects[r.obj]);
            GtTriple {
                subj_box: s.bbox,
                obj_box: o.bbox,
                subj_class: s.class,
                obj_class: o.class,
                predicate: r.pred,
            }
        })
        .collect()
}

/// Intersection over union of two `[x, y, w, h]` boxes.
pub fn iou(a: &BoxXywh, b: &BoxXywh) -> f64 {
    let ix = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let iy = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Descending score; ties by `(subj, obj, predicate)` ascending.
fn rank_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| (a.subj, a.obj, a.predicate).cmp(&(b.subj, b.obj, b.predicate)))
}

pub fn rank(predictions: &[Prediction]) -> Vec<Prediction> {
    let mut out = predictions.to_vec();
    out.sort_by(rank_order);
    out
}

/// Keeps the `cap` best predicates of every `(subj, obj)` pair.
pub fn cap_per_pair(predictions: &[Prediction], cap: usize) -> Vec<Prediction> {
    let mut kept: HashMap<(usize, usize), usize> = HashMap::new();
    rank(predictions)
        .into_iter()
        .filter(|p| {
            let n = kept.entry((p.subj, p.obj)).or_default();
            *n += 1;
            *n <= cap
        })
        .collect()
}

/// One entry per `(subj, obj)` pair: the highest score, smallest predicate id on ties.
pub fn apply_graph_constraint(predictions: &[Prediction]) -> Vec<Prediction> {
    let mut best: BTreeMap<(usize, usize), &Prediction> = BTreeMap::new();
    for p in predictions {
        best.entry((p.subj, p.obj))
            .and_modify(|b| {
                if p.score > b.score || (p.score == b.score && p.predicate < b.predicate) {
                    *b = p;
                }
            })
            .or_insert(p);
    }
    best.into_values().cloned().collect()
}

fn boxes_match(a: &BoxXywh, b: &BoxXywh, task: Task, threshold: f64) -> bool {
    match task {
        Task::Prdcls | Task::Sgcls => a == b,
        Task::Sgdet => iou(a, b) >= threshold,
    }
}

pub fn matches(p: &Prediction, g: &GtTriple, task: Task, threshold: f64) -> bool {
    p.predicate == g.predicate
        && p.subj_class == g.subj_class
        && p.obj_class == g.obj_class
        && boxes_match(&p.subj_box, &g.subj_box, task, threshold)
        && boxes_match(&p.obj_box, &g.obj_box, task, threshold)
}

/// Ranked candidate list after the constraint / per-pair cap.
pub fn ranked_candidates(predictions: &[Prediction], config: &EvalConfig) -> Result<Vec<Prediction>> {
    if let Some(p) = predictions.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::input(format!("prediction ({}, {}, {}) has a non-finite score", p.subj, p.obj, p.predicate)));
    }
    Ok(match (config.mode, config.per_pair_cap) {
        (ConstraintMode::GraphConstraint, _) => rank(&apply_graph_constraint(predictions)),
        (ConstraintMode::NoConstraint, Some(cap)) => cap_per_pair(predictions, cap),
        (ConstraintMode::NoConstraint, None) => rank(predictions),
    })
}

/// Fraction of ground-truth triples hit by the top `k` candidates. Each
/// triple counts at most once. `None` when the image has no ground truth.
pub fn image_recall(ranked: &[Prediction], gt: &[GtTriple], k: usize, config: &EvalConfig) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = gt
        .iter()
        .filter(|g| top.iter().any(|p| matches(p, g, config.task, config.iou_threshold)))
        .count();
    Some(hits as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub task: Task,
    pub mode: ConstraintMode,
    /// Mean over evaluated images, keyed by `k`.
    pub recall: BTreeMap<usize, f64>,
    pub images_evaluated: usize,
    /// Images excluded because they carry no ground-truth relation.
    pub images_skipped: usize,
    #[serde(skip)]
    pub per_image: BTreeMap<String, BTreeMap<usize, f64>>,
}

/// Macro-averaged Recall@K over the ground-truth corpus. Images without
/// predictions score zero.
pub fn recall_at_k(predictions: &[ImagePredictions], gt: &[SceneSample], config: &EvalConfig) -> Result<RecallReport> {
    config.validate()?;
    let by_id: HashMap<&str, &ImagePredictions> = predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut per_image = BTreeMap::new();
    let mut skipped = 0;
    for sample in gt {
        let triples = gt_triples(sample);
        if triples.is_empty() {
            skipped += 1;
            continue;
        }
        let preds = by_id.get(sample.image_id.as_str()).map(|p| p.predictions.as_slice()).unwrap_or(&[]);
        let ranked = ranked_candidates(preds, config)?;
        let recalls: BTreeMap<usize, f64> = config
            .ks
            .iter()
            .map(|&k| (k, image_recall(&ranked, &triples, k, config).expect("non-empty ground truth")))
            .collect();
        per_image.insert(sample.image_id.clone(), recalls);
    }
    let evaluated = per_image.len();
    let recall = config
        .ks
        .iter()
        .map(|&k| {
            let total: f64 = per_image.values().map(|r| r[&k]).sum();
            (k, if evaluated == 0 { 0.0 } else { total / evaluated as f64 })
        })
        .collect();
    Ok(RecallReport {
        task: config.task,
        mode: config.mode,
        recall,
        images_evaluated: evaluated,
        images_skipped: skipped,
        per_image,
    })
}
