//! Central finite differences.

use dpbilevel::linalg::{dist, norm, Matrix};
use dpbilevel::{stream_rng, BilevelProblem, Dataset, OracleKind, StreamKind};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exact::hyperobjective;
use crate::sampling::{sample_in_set, uniform_in_ball};
use crate::{OracleError, Result};

/// Step `h = 1e-5 (1 + ‖x‖)`.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + norm(x))
}

/// Central-difference gradient of a scalar function.
pub fn central_difference<F>(mut fun: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let h = fd_step(x);
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = fun(&probe)?;
        probe[j] = x[j] - h;
        let down = fun(&probe)?;
        probe[j] = x[j];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector function; row `j` is `∂/∂x_j`.
fn central_jacobian<F>(mut fun: F, x: &[f64], out_dim: usize) -> Matrix<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let h = fd_step(x);
    let mut probe = x.to_vec();
    let mut jac = Matrix::zeros(x.len(), out_dim);
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = fun(&probe);
        probe[j] = x[j] - h;
        let down = fun(&probe);
        probe[j] = x[j];
        for k in 0..out_dim {
            jac.set(j, k, (up[k] - down[k]) / (2.0 * h));
        }
    }
    jac
}

/// Finite differences of `x ↦ F(x)`, re-solving the lower level at every probe.
pub fn hypergradient_fd<P: BilevelProblem<f64> + ?Sized>(problem: &P, data: &Dataset<f64>, x: &[f64], tol: f64) -> Result<Vec<f64>> {
    central_difference(|p| hyperobjective(problem, data, p, tol), x)
}

/// Worst relative error of one analytic oracle over the probe points, measured
/// as `‖analytic − fd‖ / max(1, ‖fd‖)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub oracle: String,
    pub points: usize,
    pub max_error: f64,
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b) / norm(b).max(1.0)
}

/// Compares every per-sample gradient oracle with central differences of the
/// value oracles, and every second-order oracle with differences of the
/// gradients, at `points` random `(x, y, ξ)`.
pub fn check_oracles<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    points: usize,
    seed: u64,
) -> Result<Vec<OracleCheck>> {
    let (dx, dy) = (problem.dim_x(), problem.dim_y());
    let mut rng = stream_rng(seed, StreamKind::Experiment, 0x0fdc);
    let dom = problem.inner_domain();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut bump = |name: String, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    let grad = |which: OracleKind, x: &[f64], y: &[f64], r: &[f64]| {
        let mut out = vec![0.0; problem.expected_dim(which)];
        problem.per_sample_gradient(which, x, y, r, &mut out);
        out
    };
    for _ in 0..points {
        let x = sample_in_set(&mut rng, problem.feasible_x(), 1.0);
        let y = uniform_in_ball(&mut rng, &dom.center, dom.radius);
        let r = data.record(rng.random_range(0..data.len()));
        let missing = || OracleError::MissingValues(problem.name().to_string());
        for which in OracleKind::ALL {
            let upper = matches!(which, OracleKind::GradXF | OracleKind::GradYF);
            let value = |xx: &[f64], yy: &[f64]| if upper { problem.value_f(xx, yy, r) } else { problem.value_g(xx, yy, r) };
            let fd = if which.wrt_x() {
                central_difference(|p| value(p, &y).ok_or_else(missing), &x)?
            } else {
                central_difference(|p| value(&x, p).ok_or_else(missing), &y)?
            };
            bump(which.name().to_string(), rel_error(&grad(which, &x, &y, r), &fd));
        }
        if let Some(h) = problem.hessian_yy_g(&x, &y, r) {
            let fd = central_jacobian(|p| grad(OracleKind::GradYG, &x, p, r), &y, dy);
            bump("hessian_yy_g".into(), rel_error(h.as_slice(), fd.as_slice()));
        }
        if let Some(h) = problem.hessian_xy_g(&x, &y, r) {
            let fd = central_jacobian(|p| grad(OracleKind::GradYG, p, &y, r), &x, dy);
            debug_assert_eq!((h.rows(), h.cols()), (dx, dy));
            bump("hessian_xy_g".into(), rel_error(h.as_slice(), fd.as_slice()));
        }
        if let Some(h) = problem.hessian_yy_f(&x, &y, r) {
            let fd = central_jacobian(|p| grad(OracleKind::GradYF, &x, p, r), &y, dy);
            bump("hessian_yy_f".into(), rel_error(h.as_slice(), fd.as_slice()));
        }
    }
    Ok(worst.into_iter().map(|(oracle, max_error)| OracleCheck { oracle, points, max_error }).collect())
}
