//! Gradient estimators for importance weighted variational inference.
//!
//! The crate estimates the VR-IWAE bound and its REINFORCE gradients
//! (naive, global-baseline and the VIMCO family with arithmetic-mean,
//! geometric-mean, constant and variance-optimal control variates), measures
//! their signal-to-noise ratio, and runs stochastic gradient ascent with
//! ESS-driven annealing of `alpha`. Two models ship with it: an isotropic
//! Gaussian with closed-form oracles, and a stochastic volatility model whose
//! likelihood is a particle-filter estimate.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analytic;
pub mod bounds;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod svol;

pub use error::{Error, Result};
pub use estimators::{BaselineKind, Estimator, EstimatorKind, GradientEstimate};
pub use model::{Alpha, LogWeightBatch, Model, ParamVector, ScoreMatrix};
