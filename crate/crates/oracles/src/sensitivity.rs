//! Per-sample contributions to the un-noised outer estimate and how much one
//! swapped record can move it.

use dpbilevel::linalg::dist;
use dpbilevel::{BilevelProblem, Dataset, OracleKind};

use crate::exact::{solve_inner_exact, InnerTarget};
use crate::Result;

/// `∇_x f_i(x, y^λ) + λ(∇_x g_i(x, y^λ) − ∇_x g_i(x, y*))` for one record.
pub fn per_sample_estimator<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    x: &[f64],
    y_star: &[f64],
    y_lambda: &[f64],
    lambda: f64,
    record: &[f64],
) -> Vec<f64> {
    let d = problem.dim_x();
    let mut out = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    problem.per_sample_gradient(OracleKind::GradXF, x, y_lambda, record, &mut out);
    problem.per_sample_gradient(OracleKind::GradXG, x, y_lambda, record, &mut a);
    problem.per_sample_gradient(OracleKind::GradXG, x, y_star, record, &mut b);
    for j in 0..d {
        out[j] += lambda * (a[j] - b[j]);
    }
    out
}

/// Change of the dataset-mean estimate when record `index` is replaced by
/// `replacement`, with `(x, y*, y^λ)` held fixed.
pub fn swap_change<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    y_star: &[f64],
    y_lambda: &[f64],
    lambda: f64,
    index: usize,
    replacement: &[f64],
) -> f64 {
    let e = per_sample_estimator(problem, x, y_star, y_lambda, lambda, data.record(index));
    let e2 = per_sample_estimator(problem, x, y_star, y_lambda, lambda, replacement);
    dist(&e, &e2) / data.len() as f64
}

/// Largest single-swap change over every record and every candidate
/// replacement, at the exact lower-level solutions for `x`.
pub fn swap_sensitivity<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    lambda: f64,
    replacements: &[Vec<f64>],
    tol: f64,
) -> Result<f64> {
    let ys = solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?;
    let yl = solve_inner_exact(problem, data, x, InnerTarget::FPlusLambdaG, lambda, tol)?;
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        for r in replacements {
            worst = worst.max(swap_change(problem, data, x, &ys, &yl, lambda, i, r));
        }
    }
    Ok(worst)
}
