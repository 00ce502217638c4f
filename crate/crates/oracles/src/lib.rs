//! Non-private reference computations for checking the private solvers.
//!
//! Nothing here spends privacy budget and nothing here may be called from a
//! private code path: the solver crate does not depend on this one.

pub mod certify;
pub mod diagnostics;
pub mod exact;
pub mod fd;
pub mod sampling;
pub mod sensitivity;
pub mod tuning;

use thiserror::Error;

pub use certify::{certify_constants, ConstantCheck};
pub use diagnostics::{
    diagnostics_sweep, fit_loglog_slope, penalty_lipschitz_ratio, write_diagnostics_csv, ylambda_lipschitz_check, LipschitzCheck,
    PenaltyDiagnostics,
};
pub use exact::{exact_hypergradient, hyperobjective, penalty_gradient_exact, penalty_value, solve_inner_exact, InnerTarget};
pub use fd::{central_difference, check_oracles, fd_step, hypergradient_fd, OracleCheck};
pub use sensitivity::{per_sample_estimator, swap_change, swap_sensitivity};
pub use tuning::{grid_search_omega, GridSearch};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Core(#[from] dpbilevel::Error),
    #[error("inner solve stopped at gradient norm {achieved:.3e} after {iterations} iterations (tolerance {tol:.1e})")]
    NotConverged { tol: f64, achieved: f64, iterations: usize },
    #[error("problem `{0}` has no analytic second-order oracles; use the finite-difference checks instead")]
    MissingSecondOrder(String),
    #[error("problem `{0}` has no value oracles")]
    MissingValues(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;
