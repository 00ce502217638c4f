//! Grid-search reference for the regularization weight.

use dpbilevel::problems::RegTuning;
use dpbilevel::Dataset;
use serde::{Deserialize, Serialize};

use crate::exact::{solve_inner_exact, InnerTarget};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
    /// Golden-section refinement around the best grid point.
    pub best: f64,
    pub best_loss: f64,
}

/// Validation loss at the exact training solution for weight `omega`.
pub fn validation_curve(problem: &RegTuning<f64>, data: &Dataset<f64>, omega: f64, tol: f64) -> Result<f64> {
    let theta = solve_inner_exact(problem, data, &[omega], InnerTarget::G, 0.0, tol)?;
    Ok(problem.validation_loss(&theta, data))
}

/// Minimises the validation loss over `grid`, then refines by golden section
/// between the neighbours of the best grid point.
pub fn grid_search_omega(problem: &RegTuning<f64>, data: &Dataset<f64>, grid: &[f64], tol: f64) -> Result<GridSearch> {
    let losses = grid.iter().map(|&w| validation_curve(problem, data, w, tol)).collect::<Result<Vec<f64>>>()?;
    let k = losses.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    let (mut lo, mut hi) = (grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let mut fa = validation_curve(problem, data, a, tol)?;
    let mut fb = validation_curve(problem, data, b, tol)?;
    for _ in 0..80 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = validation_curve(problem, data, a, tol)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = validation_curve(problem, data, b, tol)?;
        }
    }
    let best = 0.5 * (lo + hi);
    let best_loss = validation_curve(problem, data, best, tol)?;
    Ok(GridSearch { grid: grid.to_vec(), losses, best, best_loss })
}
