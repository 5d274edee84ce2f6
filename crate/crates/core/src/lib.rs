//! Two-sided flow matching with stochastic injections.
//!
//! The crate trains a velocity/score MLP between two empirical point clouds
//! and evaluates how well the learned transport generalises. Three optional
//! injections densify the training signal: noise-to-target pre-training,
//! Gaussian jitter of source samples, and a stochastic interpolant path.

pub mod dataset;
pub mod experiment;
pub mod interpolant;
pub mod metrics;
pub mod numcore;
pub mod sampler;
pub mod trainer;

pub use numcore::{NumError, Tensor2, VelocityScoreModel};
