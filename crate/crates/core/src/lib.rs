//! Evidential fusion of multi-branch classifiers.
//!
//! Stage features are turned into nonnegative evidence, evidence into
//! Dirichlet opinions, and opinions are fused by averaging Dirichlet
//! parameters. The crate also carries the evidential loss stack with
//! closed-form gradients, a small two-branch model trained with SGD, a
//! synthetic complementary-view dataset, and evaluation metrics.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod opinion;
pub mod training;

pub use error::{Error, Result};
pub use opinion::{DirichletOpinion, EvidenceVector, FusionMode, OpinionSet, SourceTag};
