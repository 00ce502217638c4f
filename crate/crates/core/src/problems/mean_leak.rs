//! `f(x, y) = ½‖x + y‖²`, `g(x, y) = ½ Σ ‖y − ξ_i‖²`.
//!
//! The lower level returns the dataset mean and the hypergradient at the
//! origin is that mean, so any non-private solver leaks it.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::ConvexSet;
use crate::linalg::{norm, Matrix};
use crate::problem::{BilevelProblem, InnerDomain, OracleKind, ProblemConstants};
use crate::scalar::Real;

/// Per-sample lower level `g_i = (s/2)‖y − ξ_i‖²`. With `s = n` the dataset
/// mean of `g_i` is the sum `½ Σ ‖y − ξ_i‖²`.
#[derive(Debug, Clone)]
pub struct MeanLeak<S: Real> {
    dim: usize,
    scale: S,
    constants: ProblemConstants<S>,
    feasible: ConvexSet<S>,
    domain: InnerDomain<S>,
}

impl<S: Real> MeanLeak<S> {
    /// Bounds are read off the data: `‖ξ‖ ≤ r` with `r` the largest record norm
    /// (at least 1) and `X = B(0, 2r)`.
    pub fn new(data: &Dataset<S>, scale: S) -> Result<Self> {
        let r = data.records().map(norm).fold(S::one(), S::max);
        Self::with_bounds(data.record_len(), scale, r, S::lit(2.0) * r)
    }

    /// The sum form `g = ½ Σ ‖y − ξ_i‖²`.
    pub fn sum_form(data: &Dataset<S>) -> Result<Self> {
        Self::new(data, S::from_count(data.len()))
    }

    /// Declared bounds: records satisfy `‖ξ‖ ≤ data_radius`, `X = B(0, x_radius)`.
    pub fn with_bounds(dim: usize, scale: S, data_radius: S, x_radius: S) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if !(scale > S::zero()) || !(data_radius > S::zero()) || !(x_radius > S::zero()) {
            return Err(Error::param("mean_leak", "scale and radii must be positive"));
        }
        let two = S::lit(2.0);
        let half = S::lit(0.5);
        let constants = ProblemConstants::new(
            two.sqrt() * (x_radius + data_radius),
            two,
            two * scale * data_radius,
            scale,
            scale,
            scale,
            half * (x_radius + data_radius).powi(2),
        )?;
        Ok(MeanLeak {
            dim,
            scale,
            constants,
            feasible: ConvexSet::ball(vec![S::zero(); dim], x_radius)?,
            domain: InnerDomain { center: vec![S::zero(); dim], radius: data_radius },
        })
    }

    pub fn scale(&self) -> S {
        self.scale
    }

    /// `∇F(x) = x + mean(ξ)`.
    pub fn hypergradient(&self, x: &[S], data: &Dataset<S>) -> Vec<S> {
        let m = data.field_mean(0, self.dim);
        x.iter().zip(&m).map(|(&a, &b)| a + b).collect()
    }
}

impl<S: Real> BilevelProblem<S> for MeanLeak<S> {
    fn name(&self) -> &str {
        "mean_leak"
    }
    fn dim_x(&self) -> usize {
        self.dim
    }
    fn dim_y(&self) -> usize {
        self.dim
    }
    fn record_len(&self) -> usize {
        self.dim
    }
    fn constants(&self) -> &ProblemConstants<S> {
        &self.constants
    }
    fn feasible_x(&self) -> &ConvexSet<S> {
        &self.feasible
    }
    fn inner_domain(&self) -> InnerDomain<S> {
        self.domain.clone()
    }

    fn per_sample_gradient(&self, which: OracleKind, x: &[S], y: &[S], xi: &[S], out: &mut [S]) {
        match which {
            OracleKind::GradXF | OracleKind::GradYF => {
                for j in 0..self.dim {
                    out[j] = x[j] + y[j];
                }
            }
            OracleKind::GradXG => out.iter_mut().for_each(|o| *o = S::zero()),
            OracleKind::GradYG => {
                for j in 0..self.dim {
                    out[j] = self.scale * (y[j] - xi[j]);
                }
            }
        }
    }

    fn value_f(&self, x: &[S], y: &[S], _xi: &[S]) -> Option<S> {
        Some(S::lit(0.5) * x.iter().zip(y).map(|(&a, &b)| (a + b) * (a + b)).sum::<S>())
    }

    fn value_g(&self, _x: &[S], y: &[S], xi: &[S]) -> Option<S> {
        Some(S::lit(0.5) * self.scale * y.iter().zip(xi).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>())
    }

    fn hessian_yy_g(&self, _x: &[S], _y: &[S], _xi: &[S]) -> Option<Matrix<S>> {
        Some(Matrix::scaled_identity(self.dim, self.scale))
    }

    fn hessian_xy_g(&self, _x: &[S], _y: &[S], _xi: &[S]) -> Option<Matrix<S>> {
        Some(Matrix::zeros(self.dim, self.dim))
    }

    fn hessian_yy_f(&self, _x: &[S], _y: &[S], _xi: &[S]) -> Option<Matrix<S>> {
        Some(Matrix::identity(self.dim))
    }

    fn f_curvature_floor(&self) -> S {
        S::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::full_batch_gradient;

    #[test]
    fn grad_x_g_vanishes() {
        let data = Dataset::from_records(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let p = MeanLeak::sum_form(&data).unwrap();
        let g = full_batch_gradient(&p, OracleKind::GradXG, &[0.4, -1.0], &[2.0, 7.0], &data).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(p.hypergradient(&[0.0, 0.0], &data), vec![2.0, 0.0]);
    }
}
