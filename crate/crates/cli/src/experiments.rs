//! One function per experiment kind. Each returns plain data; writing
//! artifacts is left to [`crate::run_experiment`].

use std::path::Path;

use dpbilevel::inner::{derive_inner_params, QuadraticSum};
use dpbilevel::linalg::{dist, norm};
use dpbilevel::problems::{BuiltFamily, BuiltProblem, TuningReport};
use dpbilevel::{
    assign_outer_params, dp_loc_sgd, noisy_prox_descent, run_dp_bilevel, stream_rng, BilevelProblem, Dataset, RunReport, StreamKind,
};
use dpbilevel_oracles::sampling::{gaussian_point, uniform_in_ball};
use dpbilevel_oracles::{
    diagnostics_sweep, exact_hypergradient, fit_loglog_slope, grid_search_omega, hyperobjective, GridSearch, PenaltyDiagnostics,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PropositionConfig, ScalingSweep};
use crate::error::{CliError, Result};

const EXACT_TOL: f64 = 1e-10;

/// Default outer start: the projection of the origin onto `X`.
pub fn default_x0<P: BilevelProblem<f64> + ?Sized>(problem: &P) -> Vec<f64> {
    problem.feasible_x().project(&vec![0.0; problem.dim_x()])
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(CliError::Config(format!("{name} has length {} but the problem needs {d}", v.len())));
    }
    Ok(())
}

/// Quality of `x_out` measured with the exact (non-private) hypergradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub hypergradient_norm: f64,
    /// `‖G_{F,η}(x_out)‖` at the run's step size.
    pub gradient_mapping_norm: f64,
    pub hyperobjective: Option<f64>,
    pub alpha: f64,
    pub within_alpha: bool,
}

pub fn evaluate_output<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    x_out: &[f64],
    eta: f64,
    alpha: f64,
) -> Result<Evaluation> {
    let g = exact_hypergradient(problem, data, x_out, EXACT_TOL)?;
    let gm = problem.feasible_x().gradient_mapping(x_out, &g, eta)?;
    let gm_norm = norm(&gm);
    Ok(Evaluation {
        hypergradient_norm: norm(&g),
        gradient_mapping_norm: gm_norm,
        hyperobjective: hyperobjective(problem, data, x_out, EXACT_TOL).ok(),
        alpha,
        within_alpha: gm_norm <= alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelOutcome {
    pub report: RunReport<f64>,
    pub evaluation: Evaluation,
}

/// Private bilevel run; full batch unless the config sets `b_out`/`b_in`.
pub fn run_bilevel(built: &BuiltProblem, cfg: &ExperimentConfig, minibatch: bool) -> Result<BilevelOutcome> {
    let problem = built.problem();
    let data = &built.data;
    let n = data.len();
    let mut run = cfg.run.clone();
    if !minibatch {
        run.b_in = None;
        run.b_out = None;
    }
    run.validate(n)?;
    let x0 = cfg.x0.clone().unwrap_or_else(|| default_x0(&problem));
    let y0 = cfg.y0.clone().unwrap_or_else(|| problem.inner_domain().center);
    check_len("x0", &x0, problem.dim_x())?;
    check_len("y0", &y0, problem.dim_y())?;
    let params = assign_outer_params(
        problem.constants(),
        run.alpha,
        &run.budget()?,
        n,
        problem.dim_x(),
        problem.dim_y(),
        run.batch_out(n),
        &run.outer,
    )?;
    let report = run_dp_bilevel(&problem, data, &x0, &y0, &run, &params)?;
    let evaluation = evaluate_output(&problem, data, &report.x_out, params.eta, run.alpha)?;
    Ok(BilevelOutcome { report, evaluation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub report: TuningReport,
    pub reference: Option<GridSearch>,
}

pub fn run_tuning(built: &BuiltProblem, cfg: &ExperimentConfig) -> Result<TuningOutcome> {
    let BuiltFamily::RegTuning(problem) = &built.family else {
        return Err(CliError::Config("reg_tuning experiments need a reg_tuning problem".into()));
    };
    if built.constants_override.is_some() {
        return Err(CliError::Config("constants overrides are not supported for reg_tuning runs".into()));
    }
    let report = dpbilevel::problems::run_private_reg_tuning(problem, &built.data, &cfg.tuning)?;
    let reference = match &cfg.reference_grid {
        Some(grid) if grid.len() >= 2 => Some(grid_search_omega(problem, &built.data, grid, 1e-12)?),
        Some(_) => return Err(CliError::Config("reference_grid needs at least two points".into())),
        None => None,
    };
    Ok(TuningOutcome { report, reference })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakDemo {
    pub n: usize,
    pub dataset_mean: Vec<f64>,
    pub hypergradient_at_origin: Vec<f64>,
    pub max_abs_difference: f64,
}

/// The exact hypergradient at the origin of the mean-leak problem, next to
/// the dataset mean it reveals.
pub fn run_leak_demo(built: &BuiltProblem) -> Result<LeakDemo> {
    let BuiltFamily::MeanLeak(_) = &built.family else {
        return Err(CliError::Config("leak_demo needs a mean_leak problem".into()));
    };
    let problem = built.problem();
    let data = &built.data;
    let origin = vec![0.0; problem.dim_x()];
    let g = exact_hypergradient(&problem, data, &origin, 1e-14)?;
    let mean = data.field_mean(0, data.record_len());
    let max_abs_difference = g.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(LeakDemo { n: data.len(), dataset_mean: mean, hypergradient_at_origin: g, max_abs_difference })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub median_error: f64,
    pub errors: Vec<f64>,
    pub rounds: usize,
    pub iterations: usize,
    pub sigma2: f64,
    pub respects_balls: bool,
    /// Largest ledger ε over the seeds.
    pub ledger_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln median` against `ln n`.
    pub slope: f64,
    pub sweep: ScalingSweep,
}

impl ScalingResult {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "median_error"]).map_err(io_csv)?;
        for r in &self.rows {
            wr.write_record([r.n.to_string(), r.median_error.to_string()]).map_err(io_csv)?;
        }
        wr.flush().map_err(|e| CliError::Write { path: "csv".into(), source: e })?;
        Ok(())
    }
}

fn io_csv(e: csv::Error) -> CliError {
    CliError::Core(dpbilevel::Error::Csv(e))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

struct SeedRun {
    error: f64,
    respects: bool,
    rounds: usize,
    iterations: usize,
    sigma2: f64,
    ledger_epsilon: f64,
}

fn scaling_run(sweep: &ScalingSweep, n: usize, seed: u64, s: usize) -> Result<SeedRun> {
    let index = ((n as u64) << 20) | s as u64;
    let mut rng = stream_rng(seed, StreamKind::Experiment, index);
    let d = sweep.dim;
    let dir = gaussian_point(&mut rng, d, 1.0);
    let dn = norm(&dir);
    let center: Vec<f64> = dir.iter().map(|v| v * sweep.center_norm / dn).collect();
    let mut flat = Vec::with_capacity(n * d);
    for _ in 0..n {
        flat.extend(uniform_in_ball(&mut rng, &center, sweep.spread));
    }
    let data = Dataset::from_flat(d, flat)?;
    let y_star = data.field_mean(0, d);
    let obj = QuadraticSum { curvature: vec![sweep.mu; d], data: &data };
    let y0 = vec![0.0; d];
    let r0 = sweep.r0.unwrap_or(sweep.center_norm + sweep.spread);
    let params =
        derive_inner_params(sweep.mu, sweep.lipschitz, n, d, sweep.eps_prime, sweep.delta_prime, sweep.batch.min(n), r0, &sweep.inner)?;
    let mut noise = stream_rng(seed, StreamKind::InnerLowerNoise, index);
    let mut batch = stream_rng(seed, StreamKind::InnerLowerBatch, index);
    let out = dp_loc_sgd(&obj, &y0, &params, &mut noise, &mut batch)?;
    Ok(SeedRun {
        error: dist(&out.y, &y_star),
        respects: out.diagnostics.respects_balls(1e-9),
        rounds: params.rounds,
        iterations: params.iterations,
        sigma2: params.sigma2,
        ledger_epsilon: params.ledger.total()?.epsilon,
    })
}

/// Median inner-solver error against `n`, seeds fanned out over threads.
pub fn run_scaling_sweep(sweep: &ScalingSweep, seed: u64) -> Result<ScalingResult> {
    let mut rows = Vec::with_capacity(sweep.ns.len());
    for &n in &sweep.ns {
        let runs = (0..sweep.seeds).into_par_iter().map(|s| scaling_run(sweep, n, seed, s)).collect::<Result<Vec<_>>>()?;
        let errors: Vec<f64> = runs.iter().map(|r| r.error).collect();
        rows.push(ScalingRow {
            n,
            median_error: median(&errors),
            errors,
            rounds: runs[0].rounds,
            iterations: runs[0].iterations,
            sigma2: runs[0].sigma2,
            respects_balls: runs.iter().all(|r| r.respects),
            ledger_epsilon: runs.iter().map(|r| r.ledger_epsilon).fold(0.0, f64::max),
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let meds: Vec<f64> = rows.iter().map(|r| r.median_error).collect();
    Ok(ScalingResult { slope: fit_loglog_slope(&ns, &meds), rows, sweep: sweep.clone() })
}

/// `h(x) = Σ_j (a/2) u_j² − b cos(k u_j)`, `u = x − c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RippledQuadratic {
    pub a: f64,
    pub b: f64,
    pub k: f64,
    pub center: Vec<f64>,
}

impl RippledQuadratic {
    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(xi, ci)| {
                let u = xi - ci;
                0.5 * self.a * u * u - self.b * (self.k * u).cos()
            })
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(xi, ci)| {
                let u = xi - ci;
                self.a * u + self.b * self.k * (self.k * u).sin()
            })
            .collect()
    }

    pub fn smoothness(&self) -> f64 {
        self.a + self.b * self.k * self.k
    }

    /// Attained at `x = c`.
    pub fn infimum(&self) -> f64 {
        -self.b * self.center.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionRow {
    pub seed: u64,
    pub iterations: usize,
    pub t_out: usize,
    pub gap: f64,
    pub gradient_mapping_norm: f64,
    pub within_alpha: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionResult {
    pub rows: Vec<PropositionRow>,
    pub smoothness: f64,
    pub eta: f64,
    pub bias: f64,
    pub sigma: Vec<f64>,
    pub passes: usize,
    pub runs: usize,
}

/// Noisy projected descent with a biased gradient oracle on a smooth
/// non-convex test function. The bias has norm `bias_fraction · α` and points
/// against the true gradient; the noise satisfies
/// `σ √(d ln(T/γ)) = noise_fraction · α`; `T = ⌈12 L Δ / α²⌉`, `η = 1/(2L)`.
pub fn run_proposition_check(cfg: &PropositionConfig, seed: u64) -> Result<PropositionResult> {
    if cfg.set.dim() != cfg.dim {
        return Err(CliError::Config("proposition.set dimension differs from dim".into()));
    }
    let center = cfg.set.project(&vec![0.0; cfg.dim]);
    let h = RippledQuadratic { a: cfg.quadratic, b: cfg.ripple, k: cfg.frequency, center };
    let l = h.smoothness();
    let eta = 1.0 / (2.0 * l);
    let alpha = cfg.alpha;
    let beta = cfg.bias_fraction * alpha;
    let runs = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| -> Result<(PropositionRow, f64)> {
            let run_seed = seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
            let mut rng = stream_rng(run_seed, StreamKind::Experiment, 0);
            let dir = gaussian_point(&mut rng, cfg.dim, 1.0);
            let dn = norm(&dir);
            let raw: Vec<f64> = dir.iter().zip(&h.center).map(|(v, c)| c + v * cfg.start_norm / dn).collect();
            let x0 = cfg.set.project(&raw);
            let gap = h.value(&x0) - h.infimum();
            let iterations = (12.0 * l * gap / (alpha * alpha)).ceil().max(1.0) as usize;
            let sigma = cfg.noise_fraction * alpha / (cfg.dim as f64 * (iterations as f64 / cfg.gamma).ln()).sqrt();
            let oracle = |_t: usize, x: &[f64]| -> dpbilevel::Result<Vec<f64>> {
                let mut g = h.gradient(x);
                let gn = norm(&g);
                if gn > 0.0 {
                    g.iter_mut().for_each(|v| *v -= beta * *v / gn);
                }
                Ok(g)
            };
            let trace = noisy_prox_descent(oracle, &cfg.set, &x0, eta, sigma * sigma, iterations, run_seed)?;
            let gm = cfg.set.gradient_mapping(&trace.x_out, &h.gradient(&trace.x_out), eta)?;
            let gmn = norm(&gm);
            Ok((
                PropositionRow {
                    seed: run_seed,
                    iterations,
                    t_out: trace.t_out,
                    gap,
                    gradient_mapping_norm: gmn,
                    within_alpha: gmn <= alpha,
                },
                sigma,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let passes = runs.iter().filter(|r| r.0.within_alpha).count();
    Ok(PropositionResult {
        sigma: runs.iter().map(|r| r.1).collect(),
        rows: runs.into_iter().map(|r| r.0).collect(),
        smoothness: l,
        eta,
        bias: beta,
        passes,
        runs: cfg.seeds,
    })
}

impl PropositionResult {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["seed", "iterations", "t_out", "gradient_mapping_norm", "within_alpha"]).map_err(io_csv)?;
        for r in &self.rows {
            wr.write_record([
                r.seed.to_string(),
                r.iterations.to_string(),
                r.t_out.to_string(),
                r.gradient_mapping_norm.to_string(),
                r.within_alpha.to_string(),
            ])
            .map_err(io_csv)?;
        }
        wr.flush().map_err(|e| CliError::Write { path: "csv".into(), source: e })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsResult {
    pub x: Vec<f64>,
    pub rows: Vec<PenaltyDiagnostics>,
    pub gradient_gap_slope: f64,
    pub distance_slope: f64,
    /// `‖y^λ − y*‖ ≤ L0f/(λ μ_g)` at every λ, up to `1e-10`.
    pub within_bound: bool,
}

pub fn run_diagnostics(built: &BuiltProblem, cfg: &ExperimentConfig) -> Result<DiagnosticsResult> {
    let problem = built.problem();
    let x = cfg.diagnostics.x.clone().unwrap_or_else(|| default_x0(&problem));
    check_len("diagnostics.x", &x, problem.dim_x())?;
    let rows = diagnostics_sweep(&problem, &built.data, &x, &cfg.diagnostics.lambdas, cfg.diagnostics.tol)?;
    let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gradient_gap).collect();
    let dists: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    Ok(DiagnosticsResult {
        gradient_gap_slope: fit_loglog_slope(&lambdas, &gaps),
        distance_slope: fit_loglog_slope(&lambdas, &dists),
        within_bound: rows.iter().all(|r| r.distance <= r.bound + 1e-10),
        rows,
        x,
    })
}

/// Builds the configured problem, resolving manifest paths against `base`.
pub fn build_problem(cfg: &ExperimentConfig, base: &Path) -> Result<BuiltProblem> {
    let (manifest, dir) = cfg.manifest(base)?;
    Ok(manifest.build(&dir)?)
}
