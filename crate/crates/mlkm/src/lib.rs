//! Multi-layer kernel machines for nonparametric regression.
//!
//! The crate composes spectrally sampled random cosine features through a
//! multi-layer cascade, trains it with a cross-fitted alternating descent
//! scheme, and wraps any fitted predictor in weighted split-conformal
//! prediction intervals with finite-sample coverage. Exact kernel ridge
//! regression and single-layer random-feature ridge regression are included
//! as baselines, together with synthetic data generators, a CSV ingestion
//! path, and an experiment harness for accuracy, coverage, and scaling
//! studies.
//!
//! Start with the runnable programs in `examples/`; each one exercises a
//! single capability end to end.

pub mod baselines;
pub mod bench;
pub mod cli;
pub mod conformal;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod network;
pub mod seeding;
pub mod simdata;
pub mod training;

pub use error::{Error, Result};
pub use kernel::{FeatureMap, KernelFamily, KernelSpec};
pub use network::{Architecture, Model, Weights};
pub use training::{CrossFitModel, FoldPlan, TrainConfig};
