//! Multi-instance pooling for weakly supervised sound event detection.
//!
//! Frame-level probabilities are aggregated into clip-level probabilities by
//! one of five weighted-average pooling functions, either flat or through a
//! hierarchy of segment stages (e.g. 125 → 25 → 5 → 1 frames). The crate
//! provides the forward passes, their analytic gradients with a
//! finite-difference verifier, a small trainable frame scorer, a synthetic
//! weak-label dataset generator, and segment-based ER/F₁ scoring.
//!
//! The pooling and gradient code is generic over [`Scalar`], so it runs on
//! `f32`, `f64`, double-double and exact rationals; the aliases below pin
//! the common instantiations.

pub mod error;
pub mod eval;
pub mod gradients;
pub mod hierarchical;
pub mod model;
pub mod pooling;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use gradients::{
    finite_difference_check, grad_hierarchical, grad_single, loss, loss_grad,
    FiniteDifferenceReport, LossGradient, PoolingGradients,
};
pub use hierarchical::{
    aggregate_stage, default_plan, pool_hierarchical, PoolingSpec, SegmentWeightRule, StageOutput,
    StagePlan,
};
pub use pooling::{
    compute_weights, pool_single, ClipProbability, FrameScores, FrameWeights, PoolingFunction,
};
pub use scalar::Scalar;

/// Double-double scalar accepted by the pooling routines.
pub use twofloat::TwoFloat;

/// Arbitrary-precision rational scalar for exact identities.
pub type Exact = num_rational::BigRational;

pub type Scores = FrameScores<f64>;
pub type Weights = FrameWeights<f64>;
pub type ClipProb = ClipProbability<f64>;
pub type Gradients = PoolingGradients<f64>;

pub type ExactScores = FrameScores<Exact>;
pub type ExactWeights = FrameWeights<Exact>;
