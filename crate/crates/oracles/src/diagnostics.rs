//! How well the penalty surrogate tracks the hyperobjective.

use dpbilevel::linalg::dist;
use dpbilevel::problem::full_batch_value;
use dpbilevel::{full_batch_gradient, stream_rng, BilevelProblem, Dataset, OracleKind, StreamKind};
use serde::{Deserialize, Serialize};

use crate::exact::{exact_hypergradient, solve_inner_exact, InnerTarget};
use crate::sampling::sample_in_set;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyDiagnostics {
    pub lambda: f64,
    /// `|L*_λ(x) − F(x)|`, when value oracles exist.
    pub value_gap: Option<f64>,
    /// `‖∇L*_λ(x) − ∇F(x)‖`.
    pub gradient_gap: f64,
    /// `‖y^λ(x) − y*(x)‖`.
    pub distance: f64,
    /// `L0f / (λ μ_g)`.
    pub bound: f64,
}

/// One diagnostics record per `λ` at a fixed `x`.
pub fn diagnostics_sweep<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x: &[f64],
    lambdas: &[f64],
    tol: f64,
) -> Result<Vec<PenaltyDiagnostics>> {
    let c = problem.constants();
    let ys = solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?;
    let hyper = exact_hypergradient(problem, data, x, tol)?;
    let f_star = full_batch_value(problem, true, x, &ys, data);
    let g_star = full_batch_value(problem, false, x, &ys, data);
    let gx_star = full_batch_gradient(problem, OracleKind::GradXG, x, &ys, data)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let yl = solve_inner_exact(problem, data, x, InnerTarget::FPlusLambdaG, lambda, tol)?;
            let mut grad = full_batch_gradient(problem, OracleKind::GradXF, x, &yl, data)?;
            let gx = full_batch_gradient(problem, OracleKind::GradXG, x, &yl, data)?;
            for j in 0..grad.len() {
                grad[j] += lambda * (gx[j] - gx_star[j]);
            }
            let value_gap =
                match (f_star, g_star, full_batch_value(problem, true, x, &yl, data), full_batch_value(problem, false, x, &yl, data)) {
                    (Some(fs), Some(gs), Some(fl), Some(gl)) => Some((fl + lambda * (gl - gs) - fs).abs()),
                    _ => None,
                };
            Ok(PenaltyDiagnostics {
                lambda,
                value_gap,
                gradient_gap: dist(&grad, &hyper),
                distance: dist(&yl, &ys),
                bound: c.l0f / (lambda * c.mu_g),
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`. Non-positive entries are skipped.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(&x, &y)| x > 0.0 && y > 0.0).map(|(&x, &y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn write_diagnostics_csv<W: std::io::Write>(w: W, rows: &[PenaltyDiagnostics]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["lambda", "value_gap", "gradient_gap", "distance", "bound"])?;
    for r in rows {
        wr.write_record([
            r.lambda.to_string(),
            r.value_gap.map_or(String::new(), |v| v.to_string()),
            r.gradient_gap.to_string(),
            r.distance.to_string(),
            r.bound.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub max_ratio: f64,
    pub bound: f64,
    pub pairs_used: usize,
}

/// Largest `‖y^λ(x₁) − y^λ(x₂)‖ / ‖x₁ − x₂‖` over random pairs in `X`, against
/// the bound `4 L1g / μ_g`. Coincident pairs are skipped.
pub fn ylambda_lipschitz_check<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    lambda: f64,
    num_pairs: usize,
    seed: u64,
    tol: f64,
) -> Result<LipschitzCheck> {
    let c = problem.constants();
    let region = problem.certified_x();
    let mut rng = stream_rng(seed, StreamKind::Experiment, 0x11b);
    let mut max_ratio: f64 = 0.0;
    let mut used = 0;
    for _ in 0..num_pairs {
        let x1 = sample_in_set(&mut rng, &region, 1.0);
        let x2 = sample_in_set(&mut rng, &region, 1.0);
        let dx = dist(&x1, &x2);
        if dx == 0.0 {
            continue;
        }
        let y1 = solve_inner_exact(problem, data, &x1, InnerTarget::FPlusLambdaG, lambda, tol)?;
        let y2 = solve_inner_exact(problem, data, &x2, InnerTarget::FPlusLambdaG, lambda, tol)?;
        max_ratio = max_ratio.max(dist(&y1, &y2) / dx);
        used += 1;
    }
    Ok(LipschitzCheck { max_ratio, bound: 4.0 * c.l1g / c.mu_g, pairs_used: used })
}

/// Largest Lipschitz ratio in `x` of the per-sample surrogate gradient
/// `∇_x f_i(x, y^λ(x)) + λ(∇_x g_i(x, y^λ(x)) − ∇_x g_i(x, y*(x)))`, over random
/// pairs and all samples.
pub fn penalty_lipschitz_ratio<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    lambda: f64,
    num_pairs: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    let region = problem.certified_x();
    let mut rng = stream_rng(seed, StreamKind::Experiment, 0x1ab);
    let mut worst: f64 = 0.0;
    for _ in 0..num_pairs {
        let x1 = sample_in_set(&mut rng, &region, 1.0);
        let x2 = sample_in_set(&mut rng, &region, 1.0);
        let dx = dist(&x1, &x2);
        if dx == 0.0 {
            continue;
        }
        let pts = [&x1, &x2].map(|x| -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((
                solve_inner_exact(problem, data, x, InnerTarget::G, 0.0, tol)?,
                solve_inner_exact(problem, data, x, InnerTarget::FPlusLambdaG, lambda, tol)?,
            ))
        });
        let [(ys1, yl1), (ys2, yl2)] = match pts {
            [Ok(a), Ok(b)] => [a, b],
            [Err(e), _] | [_, Err(e)] => return Err(e),
        };
        for r in data.records() {
            let e1 = crate::sensitivity::per_sample_estimator(problem, &x1, &ys1, &yl1, lambda, r);
            let e2 = crate::sensitivity::per_sample_estimator(problem, &x2, &ys2, &yl2, lambda, r);
            worst = worst.max(dist(&e1, &e2) / dx);
        }
    }
    Ok(worst)
}
