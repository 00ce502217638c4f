//! High-precision lower-level solves and the closed-form hypergradient.

use dpbilevel::linalg::{axpy, norm, Matrix};
use dpbilevel::problem::full_batch_value;
use dpbilevel::{full_batch_gradient, BilevelProblem, Dataset, OracleKind};

use crate::{OracleError, Result};

/// Which lower-level objective to minimise over `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerTarget {
    /// `g(x, ·)`, minimiser `y*(x)`.
    G,
    /// `f(x, ·) + λ g(x, ·)`, minimiser `y^λ(x)`.
    FPlusLambdaG,
}

const NEWTON_ITERS: usize = 100;
const GD_ITERS: usize = 2_000_000;

fn objective_gradient<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    y: &[f64],
    which: InnerTarget,
    lambda: f64,
) -> Result<Vec<f64>> {
    let mut g = full_batch_gradient(problem, OracleKind::GradYG, x, y, data)?;
    if which == InnerTarget::FPlusLambdaG {
        g.iter_mut().for_each(|v| *v *= lambda);
        let f = full_batch_gradient(problem, OracleKind::GradYF, x, y, data)?;
        axpy(1.0, &f, &mut g);
    }
    Ok(g)
}

/// Dataset mean of a per-sample matrix oracle.
pub(crate) fn mean_matrix<F>(data: &Dataset<f64>, rows: usize, cols: usize, oracle: F) -> Option<Matrix<f64>>
where
    F: Fn(&[f64]) -> Option<Matrix<f64>>,
{
    let mut acc = Matrix::zeros(rows, cols);
    for r in data.records() {
        acc.add_assign_scaled(&oracle(r)?, 1.0);
    }
    Some(acc.scaled(1.0 / data.len() as f64))
}

fn objective_hessian<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    y: &[f64],
    which: InnerTarget,
    lambda: f64,
) -> Option<Matrix<f64>> {
    let d = problem.dim_y();
    let hg = mean_matrix(data, d, d, |r| problem.hessian_yy_g(x, y, r))?;
    match which {
        InnerTarget::G => Some(hg),
        InnerTarget::FPlusLambdaG => {
            let mut h = mean_matrix(data, d, d, |r| problem.hessian_yy_f(x, y, r))?;
            h.add_assign_scaled(&hg, lambda);
            Some(h)
        }
    }
}

/// Minimiser of the chosen lower-level objective at `x`, to gradient norm
/// `tol`. Newton with a Cholesky solve when Hessians are available, otherwise
/// gradient descent with step `1/(L1f + λ L1g)`.
pub fn solve_inner_exact<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    which: InnerTarget,
    lambda: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    if which == InnerTarget::FPlusLambdaG && !(lambda > 0.0) {
        return Err(dpbilevel::Error::InvalidParameter { name: "lambda".into(), reason: "must be positive".into() }.into());
    }
    let mut y = problem.inner_domain().center;
    let mut g = objective_gradient(problem, data, x, &y, which, lambda)?;
    let mut gn = norm(&g);
    if gn <= tol {
        return Ok(y);
    }
    if objective_hessian(problem, data, x, &y, which, lambda).is_some() {
        for it in 0..NEWTON_ITERS {
            let h = objective_hessian(problem, data, x, &y, which, lambda).expect("hessian available");
            let step = h.cholesky_solve(&g)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = y.iter().zip(&step).map(|(&a, &s)| a - t * s).collect();
                let cg = objective_gradient(problem, data, x, &cand, which, lambda)?;
                let cn = norm(&cg);
                if cn < gn || cn <= tol {
                    y = cand;
                    g = cg;
                    gn = cn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if gn <= tol {
                return Ok(y);
            }
            if !accepted {
                return Err(OracleError::NotConverged { tol, achieved: gn, iterations: it + 1 });
            }
        }
        return Err(OracleError::NotConverged { tol, achieved: gn, iterations: NEWTON_ITERS });
    }
    let c = problem.constants();
    let l = match which {
        InnerTarget::G => c.l1g,
        InnerTarget::FPlusLambdaG => c.l1f + lambda * c.l1g,
    };
    let step = 1.0 / l;
    for it in 0..GD_ITERS {
        axpy(-step, &g, &mut y);
        g = objective_gradient(problem, data, x, &y, which, lambda)?;
        gn = norm(&g);
        if gn <= tol {
            return Ok(y);
        }
        if !gn.is_finite() {
            return Err(OracleError::NotConverged { tol, achieved: gn, iterations: it + 1 });
        }
    }
    Err(OracleError::NotConverged { tol, achieved: gn, iterations: GD_ITERS })
}

/// `∇F(x) = ∇_x f − ∇²_{xy} g [∇²_{yy} g]⁻¹ ∇_y f` at `(x, y*(x))`.
pub fn exact_hypergradient<P: BilevelProblem<f64> + ?Sized>(problem: &P, data: &Dataset<f64>, x: &[f64], tol: f64) -> Result<Vec<f64>> {
    let (dx, dy) = (problem.dim_x(), problem.dim_y());
    let missing = || OracleError::MissingSecondOrder(problem.name().to_string());
    let probe = data.record(0);
    if problem.hessian_yy_g(x, &vec![0.0; dy], probe).is_none() || problem.hessian_xy_g(x, &vec![0.0; dy], probe).is_none() {
        return Err(missing());
    }
    let y = solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?;
    let hyy = mean_matrix(data, dy, dy, |r| problem.hessian_yy_g(x, &y, r)).ok_or_else(missing)?;
    let hxy = mean_matrix(data, dx, dy, |r| problem.hessian_xy_g(x, &y, r)).ok_or_else(missing)?;
    let fy = full_batch_gradient(problem, OracleKind::GradYF, x, &y, data)?;
    let mut out = full_batch_gradient(problem, OracleKind::GradXF, x, &y, data)?;
    let w = hyy.cholesky_solve(&fy)?;
    axpy(-1.0, &hxy.matvec(&w), &mut out);
    Ok(out)
}

/// `∇L*_λ(x) = ∇_x f(x, y^λ) + λ(∇_x g(x, y^λ) − ∇_x g(x, y*))`.
pub fn penalty_gradient_exact<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    lambda: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let ys = solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?;
    let yl = solve_inner_exact(problem, data, x, InnerTarget::FPlusLambdaG, lambda, tol)?;
    let mut out = full_batch_gradient(problem, OracleKind::GradXF, x, &yl, data)?;
    let g1 = full_batch_gradient(problem, OracleKind::GradXG, x, &yl, data)?;
    let g0 = full_batch_gradient(problem, OracleKind::GradXG, x, &ys, data)?;
    for j in 0..out.len() {
        out[j] += lambda * (g1[j] - g0[j]);
    }
    Ok(out)
}

/// `F(x) = f(x, y*(x))`.
pub fn hyperobjective<P: BilevelProblem<f64> + ?Sized>(problem: &P, data: &Dataset<f64>, x: &[f64], tol: f64) -> Result<f64> {
    let y = solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?;
    full_batch_value(problem, true, x, &y, data).ok_or_else(|| OracleError::MissingValues(problem.name().to_string()))
}

/// `L*_λ(x) = f(x, y^λ) + λ(g(x, y^λ) − g(x, y*))`.
pub fn penalty_value<P: BilevelProblem<f64> + ?Sized>(problem: &P, data: &Dataset<f64>, x: &[f64], lambda: f64, tol: f64) -> Result<f64> {
    let missing = || OracleError::MissingValues(problem.name().to_string());
    let ys = solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?;
    let yl = solve_inner_exact(problem, data, x, InnerTarget::FPlusLambdaG, lambda, tol)?;
    let f = full_batch_value(problem, true, x, &yl, data).ok_or_else(missing)?;
    let g1 = full_batch_value(problem, false, x, &yl, data).ok_or_else(missing)?;
    let g0 = full_batch_value(problem, false, x, &ys, data).ok_or_else(missing)?;
    Ok(f + lambda * (g1 - g0))
}
