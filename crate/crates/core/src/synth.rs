//! Synthetic corpora with a planted class partition.
//!
//! Classes are split into `K*` clusters. Predicates `1..R` are dealt into
//! `K*` blocks (`p` goes to block `(p - 1) mod K*`) and a subject-object pair
//! from clusters `(a, b)` only ever uses block `(a + b) mod K*`. Two classes
//! of different clusters therefore never share a (predicate, neighbor) edge,
//! while classes of one cluster behave identically up to sampling.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    pair_index, ClassId, FeatureStore, ImageFeatures, ObjectAnnotation, PredicateId, RelationAnnotation, RelationVocab,
    SceneSample,
};
use crate::error::{Error, Result};
use crate::hsa::ContextDictionary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// Random images; each ordered pair is annotated with probability
    /// `relation_prob` and a predicate drawn from its cluster pair's block.
    #[default]
    Sampled,
    /// Every ordered class pair (including a class with itself) carries every
    /// predicate of its block exactly `copies` times, one two-object image
    /// per triple. Used for the training split only.
    ExactPatterns,
}

fn d_classes() -> usize {
    12
}
fn d_clusters() -> usize {
    3
}
fn d_predicates() -> usize {
    7
}
fn d_train() -> usize {
    200
}
fn d_test() -> usize {
    100
}
fn d_min_inst() -> usize {
    2
}
fn d_max_inst() -> usize {
    6
}
fn d_relation_prob() -> f64 {
    0.5
}
fn d_exponent() -> f64 {
    1.0
}
fn d_feature_dim() -> usize {
    16
}
fn d_noise() -> f64 {
    0.1
}
fn d_copies() -> usize {
    3
}
fn d_width() -> u32 {
    640
}
fn d_height() -> u32 {
    480
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_clusters")]
    pub num_clusters: usize,
    /// Including the background predicate 0.
    #[serde(default = "d_predicates")]
    pub num_predicates: usize,
    #[serde(default = "d_train")]
    pub train_images: usize,
    #[serde(default = "d_test")]
    pub test_images: usize,
    #[serde(default = "d_min_inst")]
    pub min_instances: usize,
    #[serde(default = "d_max_inst")]
    pub max_instances: usize,
    #[serde(default = "d_relation_prob")]
    pub relation_prob: f64,
    /// Predicate `p` is drawn with weight `p^-exponent` within its block.
    #[serde(default = "d_exponent")]
    pub long_tail_exponent: f64,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default)]
    pub mode: SynthMode,
    /// Triples per (class pair, predicate) in exact-pattern mode.
    #[serde(default = "d_copies")]
    pub copies: usize,
    #[serde(default = "d_width")]
    pub image_width: u32,
    #[serde(default = "d_height")]
    pub image_height: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.num_clusters > self.num_classes {
            return Err(Error::input(format!(
                "K* = {} must lie in [1, N = {}]",
                self.num_clusters, self.num_classes
            )));
        }
        if self.num_predicates < self.num_clusters + 1 {
            return Err(Error::input(format!(
                "{} predicates cannot fill {} blocks besides background",
                self.num_predicates, self.num_clusters
            )));
        }
        match self.mode {
            SynthMode::Sampled if self.train_images == 0 => return Err(Error::input("no training images requested")),
            SynthMode::ExactPatterns if self.copies == 0 => return Err(Error::input("copies must be at least 1")),
            _ => {}
        }
        if self.min_instances < 2 || self.max_instances < self.min_instances {
            return Err(Error::input(format!(
                "instance range [{}, {}] must start at 2 or more",
                self.min_instances, self.max_instances
            )));
        }
        if !(0.0..=1.0).contains(&self.relation_prob) {
            return Err(Error::input("relation probability must lie in [0, 1]"));
        }
        if !(self.long_tail_exponent.is_finite() && self.long_tail_exponent >= 0.0) {
            return Err(Error::input("long-tail exponent must be finite and non-negative"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::input("noise scale must be finite and non-negative"));
        }
        if self.feature_dim == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::input("feature dimension and image size must be positive"));
        }
        Ok(())
    }
}

/// Generator state worth comparing against learned structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub partition: ContextDictionary,
    /// `supports[a][b]`: predicates a pair from clusters `(a, b)` may carry.
    pub supports: Vec<Vec<Vec<PredicateId>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub vocab: RelationVocab,
    pub train: Vec<SceneSample>,
    pub train_features: FeatureStore,
    pub test: Vec<SceneSample>,
    pub test_features: FeatureStore,
    pub ground_truth: GroundTruth,
}

impl SynthCorpus {
    pub fn planted_partition(&self) -> &ContextDictionary {
        &self.ground_truth.partition
    }
}

/// Block of predicates used by cluster pair `(a, b)`.
pub fn predicate_block(num_predicates: usize, num_clusters: usize, a: usize, b: usize) -> Vec<PredicateId> {
    let block = (a + b) % num_clusters;
    (1..num_predicates).filter(|p| (p - 1) % num_clusters == block).collect()
}

struct Generator<'a> {
    config: &'a SynthConfig,
    rng: ChaCha8Rng,
    cluster_of: Vec<usize>,
    object_protos: Vec<Array1<f64>>,
    /// Keyed by (subject cluster, object cluster, predicate).
    pair_protos: BTreeMap<(usize, usize, PredicateId), Array1<f64>>,
    samplers: Vec<Vec<(Vec<PredicateId>, WeightedIndex<f64>)>>,
}

impl<'a> Generator<'a> {
    fn new(config: &'a SynthConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, k, r) = (config.num_classes, config.num_clusters, config.num_predicates);
        let mut order: Vec<ClassId> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut raw = vec![0; n];
        for (i, &c) in order.iter().enumerate() {
            raw[c] = i % k;
        }
        let cluster_of = ContextDictionary::new(k, raw)?.canonical().assignment().to_vec();
        let d = config.feature_dim;
        let normal = |rng: &mut ChaCha8Rng| Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
        let object_protos = (0..k).map(|_| normal(&mut rng)).collect();
        let mut pair_protos = BTreeMap::new();
        let mut samplers = Vec::with_capacity(k);
        for a in 0..k {
            let mut row = Vec::with_capacity(k);
            for b in 0..k {
                let block = predicate_block(r, k, a, b);
                for &p in std::iter::once(&0).chain(&block) {
                    pair_protos.insert((a, b, p), normal(&mut rng));
                }
                let weights = block.iter().map(|&p| (p as f64).powf(-config.long_tail_exponent));
                let dist = WeightedIndex::new(weights).map_err(|e| Error::input(format!("predicate weights: {e}")))?;
                row.push((block, dist));
            }
            samplers.push(row);
        }
        Ok(Generator { config, rng, cluster_of, object_protos, pair_protos, samplers })
    }

    fn noisy(&mut self, proto: &Array1<f64>) -> Vec<f64> {
        let noise = self.config.noise;
        proto
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                v + noise * e
            })
            .collect()
    }

    fn random_box(&mut self) -> [f64; 4] {
        let (w, h) = (self.config.image_width as f64, self.config.image_height as f64);
        let bw = self.rng.random_range(0.1..0.5) * w;
        let bh = self.rng.random_range(0.1..0.5) * h;
        [self.rng.random_range(0.0..w - bw), self.rng.random_range(0.0..h - bh), bw, bh]
    }

    /// Builds an image from classes and an annotation per ordered pair.
    fn image(
        &mut self,
        image_id: String,
        classes: &[ClassId],
        relations: Vec<RelationAnnotation>,
    ) -> (SceneSample, ImageFeatures) {
        let n = classes.len();
        let objects: Vec<ObjectAnnotation> =
            classes.iter().map(|&class| ObjectAnnotation { class, bbox: self.random_box() }).collect();
        let mut labelled = vec![0; n * (n - 1)];
        for rel in &relations {
            labelled[pair_index(n, rel.subj, rel.obj)] = rel.pred;
        }
        let object_features = classes
            .iter()
            .map(|&c| {
                let proto = self.object_protos[self.cluster_of[c]].clone();
                self.noisy(&proto)
            })
            .collect();
        let mut pairs = Vec::with_capacity(n * (n - 1));
        for s in 0..n {
            for t in (0..n).filter(|&t| t != s) {
                let key = (self.cluster_of[classes[s]], self.cluster_of[classes[t]], labelled[pair_index(n, s, t)]);
                let proto = self.pair_protos[&key].clone();
                pairs.push(self.noisy(&proto));
            }
        }
        let sample = SceneSample {
            image_id: image_id.clone(),
            width: self.config.image_width,
            height: self.config.image_height,
            objects,
            relations,
        };
        (sample, ImageFeatures { image_id, objects: object_features, pairs })
    }

    fn sampled_image(&mut self, image_id: String) -> (SceneSample, ImageFeatures) {
        let c = self.config;
        let n = self.rng.random_range(c.min_instances..=c.max_instances);
        let classes: Vec<ClassId> = (0..n).map(|_| self.rng.random_range(0..c.num_classes)).collect();
        let mut relations = Vec::new();
        for s in 0..n {
            for t in (0..n).filter(|&t| t != s) {
                if self.rng.random_bool(c.relation_prob) {
                    let (block, dist) = &self.samplers[self.cluster_of[classes[s]]][self.cluster_of[classes[t]]];
                    let pred = block[dist.sample(&mut self.rng)];
                    relations.push(RelationAnnotation { subj: s, pred, obj: t });
                }
            }
        }
        self.image(image_id, &classes, relations)
    }

    fn split(&mut self, prefix: &str, count: usize) -> Result<(Vec<SceneSample>, FeatureStore)> {
        let (samples, features): (Vec<_>, Vec<_>) =
            (0..count).map(|i| self.sampled_image(format!("{prefix}-{i:06}"))).unzip();
        Ok((samples, FeatureStore::from_records(features)?))
    }

    fn exact_split(&mut self) -> Result<(Vec<SceneSample>, FeatureStore)> {
        let c = self.config;
        let mut samples = Vec::new();
        let mut features = Vec::new();
        for s in 0..c.num_classes {
            for o in 0..c.num_classes {
                let block = self.samplers[self.cluster_of[s]][self.cluster_of[o]].0.clone();
                for &pred in &block {
                    for _ in 0..c.copies {
                        let id = format!("train-{:06}", samples.len());
                        let rel = RelationAnnotation { subj: 0, pred, obj: 1 };
                        let (sample, f) = self.image(id, &[s, o], vec![rel]);
                        samples.push(sample);
                        features.push(f);
                    }
                }
            }
        }
        Ok((samples, FeatureStore::from_records(features)?))
    }
}

/// Generates both splits and the ground truth from one seed.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut g = Generator::new(config)?;
    let (train, train_features) = match config.mode {
        SynthMode::Sampled => g.split("train", config.train_images)?,
        SynthMode::ExactPatterns => g.exact_split()?,
    };
    let (test, test_features) = g.split("test", config.test_images)?;
    let (k, r) = (config.num_clusters, config.num_predicates);
    let supports = (0..k).map(|a| (0..k).map(|b| predicate_block(r, k, a, b)).collect()).collect();
    let partition = ContextDictionary::new(k, g.cluster_of.clone())?;
    Ok(SynthCorpus {
        vocab: RelationVocab::new(config.num_classes, config.num_predicates),
        train,
        train_features,
        test,
        test_features,
        ground_truth: GroundTruth { partition, supports },
    })
}

/// The generator's class partition, with cluster ids ordered by smallest member.
pub fn planted_partition(config: &SynthConfig) -> Result<ContextDictionary> {
    config.validate()?;
    ContextDictionary::new(config.num_clusters, Generator::new(config)?.cluster_of)
}
