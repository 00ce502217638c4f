//! The per-sample oracle interface and derived full/mini-batch gradients.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::ConvexSet;
use crate::linalg::{all_finite, Matrix};
use crate::scalar::Real;

/// Which partial gradient a per-sample oracle call returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OracleKind {
    #[serde(rename = "xf")]
    GradXF,
    #[serde(rename = "yf")]
    GradYF,
    #[serde(rename = "xg")]
    GradXG,
    #[serde(rename = "yg")]
    GradYG,
}

impl OracleKind {
    pub const ALL: [OracleKind; 4] = [OracleKind::GradXF, OracleKind::GradYF, OracleKind::GradXG, OracleKind::GradYG];

    pub fn name(self) -> &'static str {
        match self {
            OracleKind::GradXF => "grad_x_f",
            OracleKind::GradYF => "grad_y_f",
            OracleKind::GradXG => "grad_x_g",
            OracleKind::GradYG => "grad_y_g",
        }
    }

    pub fn wrt_x(self) -> bool {
        matches!(self, OracleKind::GradXF | OracleKind::GradXG)
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Regularity constants of a bilevel problem.
///
/// `ell` and `kappa` are always computed from the base constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct ProblemConstants<S> {
    pub l0f: S,
    pub l1f: S,
    pub l0g: S,
    pub l1g: S,
    pub l2g: S,
    pub mu_g: S,
    pub delta_f: S,
}

impl<S: Real> ProblemConstants<S> {
    pub fn new(l0f: S, l1f: S, l0g: S, l1g: S, l2g: S, mu_g: S, delta_f: S) -> Result<Self> {
        let c = ProblemConstants { l0f, l1f, l0g, l1g, l2g, mu_g, delta_f };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v > S::zero()) || !v.is_finite() {
                return Err(Error::param(name, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, S); 7] {
        [
            ("L0f", self.l0f),
            ("L1f", self.l1f),
            ("L0g", self.l0g),
            ("L1g", self.l1g),
            ("L2g", self.l2g),
            ("mu_g", self.mu_g),
            ("Delta_F", self.delta_f),
        ]
    }

    pub fn ell(&self) -> S {
        self.l0f.max(self.l1f).max(self.l0g).max(self.l1g).max(self.l2g)
    }

    pub fn kappa(&self) -> S {
        self.ell() / self.mu_g
    }

    pub fn cast<T: Real>(&self) -> ProblemConstants<T> {
        let c = |v: S| T::lit(v.as_f64());
        ProblemConstants {
            l0f: c(self.l0f),
            l1f: c(self.l1f),
            l0g: c(self.l0g),
            l1g: c(self.l1g),
            l2g: c(self.l2g),
            mu_g: c(self.mu_g),
            delta_f: c(self.delta_f),
        }
    }
}

/// Ball that contains every lower-level solution `y*(x)`, `x` in the feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct InnerDomain<S> {
    pub center: Vec<S>,
    pub radius: S,
}

/// A bilevel ERM problem `min_x f(x, y*(x))`, `y*(x) = argmin_y g(x, y)`, where
/// `f` and `g` are means of per-sample functions over a [`Dataset`].
///
/// Per-sample gradients are the only required primitive. Value and second-order
/// oracles are optional and used by verification code.
pub trait BilevelProblem<S: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn record_len(&self) -> usize;
    fn constants(&self) -> &ProblemConstants<S>;
    fn feasible_x(&self) -> &ConvexSet<S>;
    fn inner_domain(&self) -> InnerDomain<S>;

    /// Part of `X` on which the declared constants hold. Defaults to `X`.
    fn certified_x(&self) -> ConvexSet<S> {
        self.feasible_x().clone()
    }

    /// Writes the requested partial gradient of the per-sample function into `out`.
    fn per_sample_gradient(&self, which: OracleKind, x: &[S], y: &[S], record: &[S], out: &mut [S]);

    fn value_f(&self, _x: &[S], _y: &[S], _record: &[S]) -> Option<S> {
        None
    }

    fn value_g(&self, _x: &[S], _y: &[S], _record: &[S]) -> Option<S> {
        None
    }

    /// Per-sample `∇²_yy g`, `d_y × d_y`.
    fn hessian_yy_g(&self, _x: &[S], _y: &[S], _record: &[S]) -> Option<Matrix<S>> {
        None
    }

    /// Per-sample mixed block `∇²_xy g`, `d_x × d_y`.
    fn hessian_xy_g(&self, _x: &[S], _y: &[S], _record: &[S]) -> Option<Matrix<S>> {
        None
    }

    /// Per-sample `∇²_yy f`, `d_y × d_y`.
    fn hessian_yy_f(&self, _x: &[S], _y: &[S], _record: &[S]) -> Option<Matrix<S>> {
        None
    }

    /// Lower bound on the curvature of `f(x, ·)`. Defaults to `-L1f`, which
    /// holds for any `L1f`-smooth `f`.
    fn f_curvature_floor(&self) -> S {
        -self.constants().l1f
    }

    fn expected_dim(&self, which: OracleKind) -> usize {
        if which.wrt_x() {
            self.dim_x()
        } else {
            self.dim_y()
        }
    }
}

fn check_point<S: Real, P: BilevelProblem<S> + ?Sized>(problem: &P, which: OracleKind, x: &[S], y: &[S], data: &Dataset<S>) -> Result<()> {
    if x.len() != problem.dim_x() {
        return Err(Error::DimensionMismatch { context: format!("{which} (x)"), expected: problem.dim_x(), got: x.len() });
    }
    if y.len() != problem.dim_y() {
        return Err(Error::DimensionMismatch { context: format!("{which} (y)"), expected: problem.dim_y(), got: y.len() });
    }
    if data.record_len() != problem.record_len() {
        return Err(Error::DimensionMismatch {
            context: format!("{which} (record)"),
            expected: problem.record_len(),
            got: data.record_len(),
        });
    }
    Ok(())
}

/// Records per reduction chunk. Partial sums over fixed chunks are combined left
/// to right, so the result does not depend on how many threads ran.
pub const REDUCTION_CHUNK: usize = 4096;

fn sum_range<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    which: OracleKind,
    x: &[S],
    y: &[S],
    data: &Dataset<S>,
    range: std::ops::Range<usize>,
    dim: usize,
) -> Vec<S> {
    let mut acc = vec![S::zero(); dim];
    let mut buf = vec![S::zero(); dim];
    for i in range {
        problem.per_sample_gradient(which, x, y, data.record(i), &mut buf);
        for (a, &b) in acc.iter_mut().zip(&buf) {
            *a = *a + b;
        }
    }
    acc
}

/// Mean of per-sample gradients over the whole dataset.
pub fn full_batch_gradient<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    which: OracleKind,
    x: &[S],
    y: &[S],
    data: &Dataset<S>,
) -> Result<Vec<S>> {
    check_point(problem, which, x, y, data)?;
    let dim = problem.expected_dim(which);
    let n = data.len();
    let sum = if n <= REDUCTION_CHUNK {
        sum_range(problem, which, x, y, data, 0..n, dim)
    } else {
        let chunks = n.div_ceil(REDUCTION_CHUNK);
        let partials: Vec<Vec<S>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * REDUCTION_CHUNK;
                sum_range(problem, which, x, y, data, lo..(lo + REDUCTION_CHUNK).min(n), dim)
            })
            .collect();
        let mut acc = vec![S::zero(); dim];
        for p in partials {
            for (a, b) in acc.iter_mut().zip(p) {
                *a = *a + b;
            }
        }
        acc
    };
    finish_mean(sum, n, which)
}

/// Mean of per-sample gradients over a multiset of indices, in the given order.
pub fn minibatch_gradient<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    which: OracleKind,
    x: &[S],
    y: &[S],
    data: &Dataset<S>,
    batch: &[usize],
) -> Result<Vec<S>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_point(problem, which, x, y, data)?;
    let n = data.len();
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, n });
    }
    let dim = problem.expected_dim(which);
    let mut acc = vec![S::zero(); dim];
    let mut buf = vec![S::zero(); dim];
    for &i in batch {
        problem.per_sample_gradient(which, x, y, data.record(i), &mut buf);
        for (a, &b) in acc.iter_mut().zip(&buf) {
            *a = *a + b;
        }
    }
    finish_mean(acc, batch.len(), which)
}

fn finish_mean<S: Real>(mut sum: Vec<S>, count: usize, which: OracleKind) -> Result<Vec<S>> {
    let inv = S::one() / S::from_count(count);
    sum.iter_mut().for_each(|v| *v = *v * inv);
    if !all_finite(&sum) {
        return Err(Error::NonFinite(which.name().into()));
    }
    Ok(sum)
}

/// Dataset mean of an optional per-sample value oracle.
pub fn full_batch_value<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    upper: bool,
    x: &[S],
    y: &[S],
    data: &Dataset<S>,
) -> Option<S> {
    let mut acc = S::zero();
    for r in data.records() {
        let v = if upper { problem.value_f(x, y, r)? } else { problem.value_g(x, y, r)? };
        acc = acc + v;
    }
    Some(acc / S::from_count(data.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::mean_leak::MeanLeak;

    fn two_point() -> (MeanLeak<f64>, Dataset<f64>) {
        let data = Dataset::from_records(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        (MeanLeak::new(&data, 1.0).unwrap(), data)
    }

    #[test]
    fn dimension_error_names_oracle() {
        let (p, d) = two_point();
        let err = full_batch_gradient(&p, OracleKind::GradYG, &[0.0], &[0.0, 0.0], &d).unwrap_err();
        assert!(err.to_string().contains("grad_y_g"), "{err}");
    }

    #[test]
    fn empty_batch_is_error() {
        let (p, d) = two_point();
        assert!(matches!(minibatch_gradient(&p, OracleKind::GradXF, &[0.0, 0.0], &[0.0, 0.0], &d, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn constants_must_be_positive() {
        assert!(ProblemConstants::new(1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0).is_err());
        let c = ProblemConstants::new(1.0, 2.0, 3.0, 0.5, 0.5, 0.25, 1.0).unwrap();
        assert_eq!(c.ell(), 3.0);
        assert_eq!(c.kappa(), 12.0);
    }
}
