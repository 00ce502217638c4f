//! Built-in problem families.

pub mod manifest;
pub mod mean_leak;
pub mod quadratic;
pub mod reg_tuning;

pub use manifest::{BuiltFamily, BuiltProblem, DataSource, ProblemFamily, ProblemManifest};
pub use mean_leak::MeanLeak;
pub use quadratic::{QuadraticBilevel, QuadraticBounds, QuadraticGenerator};
pub use reg_tuning::{
    private_reg_tuning_step, run_private_reg_tuning, RegTuning, RegTuningSpec, Regularizer, RidgeGenerator, TuningConfig, TuningReport,
};

use crate::geometry::ConvexSet;
use crate::linalg::Matrix;
use crate::problem::{BilevelProblem, InnerDomain, OracleKind, ProblemConstants};
use crate::scalar::Real;

/// Any problem with its declared constants replaced. Useful for checking
/// that certification catches a wrong declaration.
pub struct WithConstants<'a, S: Real> {
    inner: &'a dyn BilevelProblem<S>,
    constants: ProblemConstants<S>,
}

impl<'a, S: Real> WithConstants<'a, S> {
    pub fn new(inner: &'a dyn BilevelProblem<S>, constants: ProblemConstants<S>) -> Self {
        WithConstants { inner, constants }
    }
}

impl<S: Real> BilevelProblem<S> for WithConstants<'_, S> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn dim_y(&self) -> usize {
        self.inner.dim_y()
    }
    fn record_len(&self) -> usize {
        self.inner.record_len()
    }
    fn constants(&self) -> &ProblemConstants<S> {
        &self.constants
    }
    fn feasible_x(&self) -> &ConvexSet<S> {
        self.inner.feasible_x()
    }
    fn certified_x(&self) -> ConvexSet<S> {
        self.inner.certified_x()
    }
    fn inner_domain(&self) -> InnerDomain<S> {
        self.inner.inner_domain()
    }
    fn per_sample_gradient(&self, which: OracleKind, x: &[S], y: &[S], record: &[S], out: &mut [S]) {
        self.inner.per_sample_gradient(which, x, y, record, out)
    }
    fn value_f(&self, x: &[S], y: &[S], record: &[S]) -> Option<S> {
        self.inner.value_f(x, y, record)
    }
    fn value_g(&self, x: &[S], y: &[S], record: &[S]) -> Option<S> {
        self.inner.value_g(x, y, record)
    }
    fn hessian_yy_g(&self, x: &[S], y: &[S], record: &[S]) -> Option<Matrix<S>> {
        self.inner.hessian_yy_g(x, y, record)
    }
    fn hessian_xy_g(&self, x: &[S], y: &[S], record: &[S]) -> Option<Matrix<S>> {
        self.inner.hessian_xy_g(x, y, record)
    }
    fn hessian_yy_f(&self, x: &[S], y: &[S], record: &[S]) -> Option<Matrix<S>> {
        self.inner.hessian_yy_f(x, y, record)
    }
    fn f_curvature_floor(&self) -> S {
        self.inner.f_curvature_floor()
    }
}
