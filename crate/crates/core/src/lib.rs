//! Output-space machinery for scene graph relation classifiers: a class-level
//! knowledge graph, behavior-pattern clustering of object classes into
//! contexts, and a relation head whose classifiers are generated from context
//! embeddings by graph convolution over co-occurrence statistics.
//!
//! Numeric code is generic over [`scalar::Real`] (training and inference) and
//! [`scalar::Similarity`] (clustering, including exact rationals). The aliases
//! below fix the usual choices.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod hsa;
pub mod kg;
pub mod scalar;
pub mod sec;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

use num_rational::{BigRational, Rational64};

pub type ClusteringExact = hsa::Clustering<BigRational>;
pub type ClusteringRational64 = hsa::Clustering<Rational64>;
pub type ClusteringF64 = hsa::Clustering<f64>;
pub type MergeTreeExact = hsa::MergeTree<BigRational>;
pub type MergeTreeF64 = hsa::MergeTree<f64>;
pub type CooccurrenceModelF64 = kg::CooccurrenceModel<f64>;
pub type CooccurrenceModelF32 = kg::CooccurrenceModel<f32>;
pub type SecHeadF64 = sec::SecHead<f64>;
pub type SecHeadF32 = sec::SecHead<f32>;
pub type SecModelF64 = sec::SecModel<f64>;
pub type SecModelF32 = sec::SecModel<f32>;
