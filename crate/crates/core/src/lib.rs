//! First-order differentially private bilevel optimization.
//!
//! The outer loop runs noisy projected descent on the penalty surrogate
//! `L*_λ(x) = min_y f(x, y) + λ(g(x, y) − min_z g(x, z))`, whose gradient needs
//! only first-order oracles at two approximate lower-level solutions. Those are
//! produced by a localized private SGD, and every release is recorded in a
//! privacy ledger.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases fix the scalar to `f64`. Privacy accounting always runs in `f64`.

pub mod data;
pub mod error;
pub mod geometry;
pub mod inner;
pub mod linalg;
pub mod outer;
pub mod privacy;
pub mod problem;
pub mod problems;
pub mod scalar;

pub use data::Dataset;
pub use error::{Error, Result};
pub use geometry::ConvexSet;
pub use inner::{
    derive_inner_params, dp_loc_gd, dp_loc_sgd, InnerDiagnostics, InnerObjective, InnerOutput, InnerOverrides, InnerParams, LowerLevel,
    PenalizedLevel,
};
pub use linalg::Matrix;
pub use outer::{
    assign_outer_params, estimate_hypergradient, noisy_prox_descent, run_dp_bilevel, select_output, BudgetSplit, OuterOverrides,
    OuterParams, RunConfig, RunReport,
};
pub use privacy::{
    advanced_composition, amplify_by_subsampling, calibrate_gaussian, stream_rng, CompositionRule, GaussianMechanismParams, LedgerEntry,
    PrivacyBudget, PrivacyLedger, PrivacySpend, StreamKind,
};
pub use problem::{full_batch_gradient, minibatch_gradient, BilevelProblem, InnerDomain, OracleKind, ProblemConstants};
pub use scalar::Real;

pub type Dataset64 = Dataset<f64>;
pub type ConvexSet64 = ConvexSet<f64>;
pub type Matrix64 = Matrix<f64>;
pub type ProblemConstants64 = ProblemConstants<f64>;
pub type InnerParams64 = InnerParams<f64>;
pub type OuterParams64 = OuterParams<f64>;
pub type RunReport64 = RunReport<f64>;
pub type MeanLeak64 = problems::MeanLeak<f64>;
pub type QuadraticBilevel64 = problems::QuadraticBilevel<f64>;
pub type RegTuning64 = problems::RegTuning<f64>;
