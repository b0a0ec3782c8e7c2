//! Continual debiasing for text classifiers.
//!
//! The crate trains a small differentiable classifier over a sequence of
//! attribute-focused sub-datasets, mitigating one demographic bias per stage
//! while replaying hard samples and regularizing disentangled representations
//! so earlier debiasing is not forgotten. It also builds the stratified
//! benchmark and computes every fairness metric used to evaluate the runs.

// Validation writes `!(x >= 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod continual;
pub mod corpus;
pub mod debias;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod fairmetrics;
pub mod graph;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
