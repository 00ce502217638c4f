//! Penalty-based private outer loop: parameter assignment, hypergradient
//! estimation, the noisy prox descent engine and the full bilevel run.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::ConvexSet;
use crate::inner::{derive_inner_params, dp_loc_sgd, InnerDiagnostics, InnerOverrides, InnerParams, LowerLevel, PenalizedLevel};
use crate::linalg::{all_finite, clip_norm, dist, norm};
use crate::privacy::{
    add_gaussian_noise_in_place, calibrate_gaussian, deamplify, invert_advanced_composition, stream_rng, CompositionRule,
    GaussianMechanismParams, LedgerEntry, PrivacyBudget, PrivacyLedger, PrivacySpend, StreamKind,
};
use crate::problem::{BilevelProblem, OracleKind, ProblemConstants};
use crate::scalar::Real;

/// How the overall budget is divided over the `T` outer rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSplit {
    /// Largest per-round spend whose T-fold composition fits `(ε, δ)`.
    #[default]
    Calibrated,
    /// `(ε/√(18T), δ/(3(T+1)))` per mechanism. Its advanced composition
    /// exceeds `ε` by roughly a `sqrt(ln(T/δ))` factor.
    Printed,
}

/// Explicit constants for the outer parameter assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterOverrides {
    pub c_lambda: f64,
    pub c_t: f64,
    pub c_eta: f64,
    /// `L_smooth = c_smooth · ℓκ³`.
    pub c_smooth: f64,
    /// Sensitivity constant: per-sample estimator is `c_lipschitz · ℓκ`-bounded.
    pub c_lipschitz: f64,
    /// Multiplier on the calibrated outer noise variance; `0` disables noise.
    pub noise_scale: f64,
    /// Optional per-sample clip threshold for the hypergradient estimator.
    pub clip: Option<f64>,
    pub budget_split: BudgetSplit,
    /// Hard cap on the number of outer iterations.
    pub t_cap: Option<usize>,
    pub mechanism_epsilon_cap: f64,
    /// Log `‖ĝ_B − ĝ_S‖` of the mini-batch estimator at every step.
    pub log_batch_deviation: bool,
}

impl Default for OuterOverrides {
    fn default() -> Self {
        OuterOverrides {
            c_lambda: 1.0,
            c_t: 1.0,
            c_eta: 1.0,
            c_smooth: 1.0,
            c_lipschitz: 5.0,
            noise_scale: 1.0,
            clip: None,
            budget_split: BudgetSplit::Calibrated,
            t_cap: None,
            mechanism_epsilon_cap: 0.999,
            log_batch_deviation: false,
        }
    }
}

impl OuterOverrides {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("outer.c_lambda", self.c_lambda),
            ("outer.c_t", self.c_t),
            ("outer.c_eta", self.c_eta),
            ("outer.c_smooth", self.c_smooth),
            ("outer.c_lipschitz", self.c_lipschitz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::param("outer.noise_scale", "must be non-negative"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::param("outer.clip", "must be positive"));
            }
        }
        if self.t_cap == Some(0) {
            return Err(Error::param("outer.t_cap", "must be positive"));
        }
        if !(self.mechanism_epsilon_cap > 0.0 && self.mechanism_epsilon_cap < 1.0) {
            return Err(Error::param("outer.mechanism_epsilon_cap", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Everything a run needs besides the problem and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Inner batch size; `None` means full batch.
    pub b_in: Option<usize>,
    /// Outer batch size; `None` means full batch.
    pub b_out: Option<usize>,
    pub outer: OuterOverrides,
    pub inner: InnerOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            gamma: 0.05,
            alpha: 0.1,
            epsilon: 1.0,
            delta: 1e-6,
            b_in: None,
            b_out: None,
            outer: OuterOverrides::default(),
            inner: InnerOverrides::default(),
        }
    }
}

impl RunConfig {
    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.delta)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param("gamma", "must lie in (0, 1)"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::param("alpha", "must be positive"));
        }
        self.budget()?;
        for (name, b) in [("b_in", self.b_in), ("b_out", self.b_out)] {
            if let Some(b) = b {
                if b == 0 || b > n {
                    return Err(Error::param(name, format!("need 1 <= {name} <= n = {n}, got {b}")));
                }
            }
        }
        self.outer.validate()?;
        self.inner.validate()
    }

    pub fn batch_in(&self, n: usize) -> usize {
        self.b_in.unwrap_or(n)
    }

    pub fn batch_out(&self, n: usize) -> usize {
        self.b_out.unwrap_or(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct OuterParams<S> {
    pub lambda: S,
    pub sigma2: S,
    pub eta: S,
    pub iterations: usize,
    pub alpha: S,
    pub b_out: usize,
    pub n: usize,
    pub l_smooth: S,
    /// Budget of one outer round (two inner solves plus one Gaussian step).
    pub round_budget: PrivacySpend,
    /// Budget of each of the three mechanisms in a round.
    pub mechanism_budget: PrivacySpend,
    pub sensitivity: f64,
    pub clip: Option<S>,
    pub mechanism: Option<GaussianMechanismParams>,
    pub non_private: bool,
    pub warnings: Vec<String>,
    pub overrides: OuterOverrides,
}

/// Names and values of the four terms bounding α.
pub fn alpha_constraints<S: Real>(c: &ProblemConstants<S>) -> [(&'static str, f64); 4] {
    let cf = c.cast::<f64>();
    let (ell, kappa) = (cf.ell(), cf.kappa());
    [
        ("1/(2*kappa)", 1.0 / (2.0 * kappa)),
        ("L0g/L0f", cf.l0g / cf.l0f),
        ("L1g/L1f", cf.l1g / cf.l1f),
        ("Delta_F/(ell*kappa)", cf.delta_f / (ell * kappa)),
    ]
}

/// Largest admissible α, with the binding constraint.
pub fn alpha_bound<S: Real>(c: &ProblemConstants<S>) -> (f64, &'static str) {
    let cf = c.cast::<f64>();
    let lk3 = cf.ell() * cf.kappa().powi(3);
    let (name, v) = alpha_constraints(c).into_iter().fold(("", f64::INFINITY), |acc, (n, v)| if v < acc.1 { (n, v) } else { acc });
    (lk3 * v, name)
}

/// Per-mechanism budget for `T` rounds of three mechanisms each.
pub fn split_budget(budget: &PrivacyBudget, rounds: usize, split: BudgetSplit) -> Result<(PrivacySpend, PrivacySpend)> {
    let t = rounds as f64;
    match split {
        BudgetSplit::Printed => {
            let mech = PrivacySpend::new(budget.epsilon / (18.0 * t).sqrt(), budget.delta / (3.0 * (t + 1.0)));
            Ok((PrivacySpend::new(3.0 * mech.epsilon, 3.0 * mech.delta), mech))
        }
        BudgetSplit::Calibrated => {
            let adv = invert_advanced_composition(budget.epsilon, budget.delta, rounds as u64)?;
            let basic = PrivacySpend::new(budget.epsilon / t, budget.delta / t);
            let round = if basic.epsilon > adv.epsilon { basic } else { adv };
            let mut mech = PrivacySpend::new(round.epsilon / 3.0, round.delta / 3.0);
            // shrink until the exact ledger fold over T rounds fits
            for _ in 0..200 {
                if round_pattern_total(mech, rounds)?.fits(budget) {
                    return Ok((PrivacySpend::new(mech.epsilon * 3.0, mech.delta * 3.0), mech));
                }
                mech.epsilon *= 1.0 - 1e-12;
                mech.delta *= 1.0 - 1e-12;
            }
            Err(Error::Numerical("could not fit the per-round budget into the total".into()))
        }
    }
}

fn round_pattern_total(mech: PrivacySpend, rounds: usize) -> Result<PrivacySpend> {
    let mut entries = Vec::with_capacity(3 * rounds);
    for t in 0..rounds as u64 {
        for label in ["inner lower", "inner penalty", "outer gaussian"] {
            entries.push(LedgerEntry::new(label, mech.epsilon, mech.delta, CompositionRule::Advanced, t));
        }
    }
    PrivacyLedger::from_entries(entries).total()
}

/// Gaussian noise for one outer step at the given sensitivity: the mechanism
/// budget is deamplified when `b_out < n`, capped to the mechanism's range, and
/// the variance multiplied by `noise_scale`.
pub fn calibrate_outer_noise(
    sensitivity: f64,
    mechanism_budget: PrivacySpend,
    b_out: usize,
    n: usize,
    overrides: &OuterOverrides,
    warnings: &mut Vec<String>,
) -> Result<(f64, Option<GaussianMechanismParams>)> {
    if overrides.noise_scale <= 0.0 {
        return Ok((0.0, None));
    }
    let mut mech_eps = if b_out < n { deamplify(mechanism_budget.epsilon, b_out, n)? } else { mechanism_budget.epsilon };
    if mech_eps >= overrides.mechanism_epsilon_cap {
        warnings.push(format!(
            "outer mechanism epsilon {mech_eps:.4} reduced to {} (Gaussian mechanism range)",
            overrides.mechanism_epsilon_cap
        ));
        mech_eps = overrides.mechanism_epsilon_cap;
    }
    let m = calibrate_gaussian(sensitivity, mech_eps, mechanism_budget.delta)?;
    Ok((m.sigma2 * overrides.noise_scale, Some(m)))
}

/// Outer parameter assignment for target stationarity `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn assign_outer_params<S: Real>(
    constants: &ProblemConstants<S>,
    alpha: S,
    budget: &PrivacyBudget,
    n: usize,
    _d_x: usize,
    _d_y: usize,
    b_out: usize,
    overrides: &OuterOverrides,
) -> Result<OuterParams<S>> {
    constants.validate()?;
    overrides.validate()?;
    budget.validate()?;
    if b_out == 0 || b_out > n {
        return Err(Error::param("b_out", format!("need 1 <= b_out <= n = {n}, got {b_out}")));
    }
    let a = alpha.as_f64();
    if !(a > 0.0) {
        return Err(Error::param("alpha", "must be positive"));
    }
    let (bound, binding) = alpha_bound(constants);
    if a > bound {
        return Err(Error::AlphaPrecondition { constraint: binding.to_string(), alpha: a, bound });
    }
    let cf = constants.cast::<f64>();
    let (ell, kappa) = (cf.ell(), cf.kappa());
    let lk3 = ell * kappa.powi(3);
    let mut warnings = Vec::new();

    let lambda = overrides.c_lambda * lk3 / a;
    let lambda_min = (2.0 * cf.l1g / cf.mu_g).max(cf.l0f / cf.l0g).max(cf.l1f / cf.l1g);
    if lambda < lambda_min {
        warnings.push(format!("lambda = {lambda:.4} below the inexact-gradient threshold {lambda_min:.4}"));
    }
    let mut iterations = (overrides.c_t * cf.delta_f * lk3 / (a * a)).ceil().max(1.0) as usize;
    if let Some(cap) = overrides.t_cap {
        if iterations > cap {
            warnings.push(format!("outer iterations capped at {cap} (assignment asks for {iterations})"));
            iterations = cap;
        }
    }
    let l_smooth = overrides.c_smooth * lk3;
    let eta = (overrides.c_eta / lk3).min(1.0 / (2.0 * l_smooth));

    let (round_budget, mechanism_budget) = split_budget(budget, iterations, overrides.budget_split)?;
    if overrides.budget_split == BudgetSplit::Printed {
        warnings.push("printed per-round budget: composed total may exceed (epsilon, delta)".to_string());
    }

    let batch = b_out as f64;
    let (sensitivity, clip) = match overrides.clip {
        Some(c) => (2.0 * c / batch, Some(S::lit(c))),
        None => (2.0 * overrides.c_lipschitz * ell * kappa / batch, None),
    };
    let non_private = overrides.noise_scale < 1.0;
    let (sigma2, mechanism) = calibrate_outer_noise(sensitivity, mechanism_budget, b_out, n, overrides, &mut warnings)?;
    if non_private {
        warnings.push("outer noise scale below 1: no privacy guarantee".to_string());
    }

    Ok(OuterParams {
        lambda: S::lit(lambda),
        sigma2: S::lit(sigma2),
        eta: S::lit(eta),
        iterations,
        alpha,
        b_out,
        n,
        l_smooth: S::lit(l_smooth),
        round_budget,
        mechanism_budget,
        sensitivity,
        clip,
        mechanism,
        non_private,
        warnings,
        overrides: overrides.clone(),
    })
}

/// Un-noised hypergradient estimate
/// `∇_x f(x, ỹ^λ) + λ(∇_x g(x, ỹ^λ) − ∇_x g(x, ỹ))` averaged over `batch`
/// (all samples when `None`), with optional per-sample clipping.
#[allow(clippy::too_many_arguments)]
pub fn estimate_hypergradient<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    data: &Dataset<S>,
    x: &[S],
    y_tilde: &[S],
    y_tilde_lambda: &[S],
    lambda: S,
    batch: Option<&[usize]>,
    clip: Option<S>,
) -> Result<Vec<S>> {
    let dx = problem.dim_x();
    if x.len() != dx || y_tilde.len() != problem.dim_y() || y_tilde_lambda.len() != problem.dim_y() {
        return Err(Error::DimensionMismatch { context: "estimate_hypergradient".into(), expected: dx, got: x.len() });
    }
    let n = data.len();
    let mut acc = vec![S::zero(); dx];
    let mut c = vec![S::zero(); dx];
    let mut a = vec![S::zero(); dx];
    let mut b = vec![S::zero(); dx];
    let mut add_sample = |i: usize, acc: &mut Vec<S>| {
        let r = data.record(i);
        problem.per_sample_gradient(OracleKind::GradXF, x, y_tilde_lambda, r, &mut c);
        problem.per_sample_gradient(OracleKind::GradXG, x, y_tilde_lambda, r, &mut a);
        problem.per_sample_gradient(OracleKind::GradXG, x, y_tilde, r, &mut b);
        for j in 0..dx {
            c[j] = c[j] + lambda * (a[j] - b[j]);
        }
        if let Some(cl) = clip {
            clip_norm(&mut c, cl);
        }
        acc.iter_mut().zip(&c).for_each(|(s, &v)| *s = *s + v);
    };
    let count = match batch {
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::EmptyBatch);
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, n });
                }
                add_sample(i, &mut acc);
            }
            idx.len()
        }
        None => {
            for i in 0..n {
                add_sample(i, &mut acc);
            }
            n
        }
    };
    let inv = S::one() / S::from_count(count);
    acc.iter_mut().for_each(|v| *v = *v * inv);
    if !all_finite(&acc) {
        return Err(Error::NonFinite("hypergradient estimate".into()));
    }
    Ok(acc)
}

/// First index of the smallest displacement.
pub fn select_output<S: Real>(displacements: &[S]) -> Result<usize> {
    if displacements.is_empty() {
        return Err(Error::param("displacements", "must be non-empty"));
    }
    let mut best = 0;
    for (i, d) in displacements.iter().enumerate().skip(1) {
        if *d < displacements[best] || displacements[best].is_nan() {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct DescentTrace<S> {
    pub iterates: Vec<Vec<S>>,
    pub displacements: Vec<S>,
    pub t_out: usize,
    pub x_out: Vec<S>,
}

/// `x_{t+1} = argmin_{u ∈ set} ⟨ĝ_t + ν_t, u⟩ + ‖u − x_t‖²/(2η)`, `ν_t ~ N(0, σ² I)`,
/// returning `x_{t_out}` with `t_out` the first smallest displacement.
///
/// `oracle(t, x_t)` supplies the un-noised estimate; `ν_t` is drawn from
/// `stream_rng(seed, OuterNoise, t)`.
pub fn noisy_prox_descent<S, F>(
    mut oracle: F,
    set: &ConvexSet<S>,
    x0: &[S],
    eta: S,
    sigma2: S,
    iterations: usize,
    seed: u64,
) -> Result<DescentTrace<S>>
where
    S: Real,
    F: FnMut(usize, &[S]) -> Result<Vec<S>>,
{
    if iterations == 0 {
        return Err(Error::param("T", "must be at least 1"));
    }
    if !(eta > S::zero()) {
        return Err(Error::param("eta", "must be positive"));
    }
    if !set.contains(x0) {
        return Err(Error::NotInSet);
    }
    let mut iterates = Vec::with_capacity(iterations + 1);
    let mut displacements = Vec::with_capacity(iterations);
    let mut x = x0.to_vec();
    iterates.push(x.clone());
    for t in 0..iterations {
        let mut g = oracle(t, &x)?;
        if g.len() != x.len() {
            return Err(Error::DimensionMismatch { context: "outer oracle".into(), expected: x.len(), got: g.len() });
        }
        let mut rng = stream_rng(seed, StreamKind::OuterNoise, t as u64);
        add_gaussian_noise_in_place(&mut g, sigma2, &mut rng);
        let next = set.prox_step(&x, &g, eta);
        if !all_finite(&next) {
            return Err(Error::NonFinite(format!("outer iterate {}", t + 1)));
        }
        displacements.push(dist(&next, &x));
        x = next;
        iterates.push(x.clone());
    }
    let t_out = select_output(&displacements)?;
    Ok(DescentTrace { x_out: iterates[t_out].clone(), iterates, displacements, t_out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub t: usize,
    pub lower: InnerDiagnostics,
    pub penalty: InnerDiagnostics,
    pub estimate_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct ResolvedParams<S> {
    pub outer: OuterParams<S>,
    pub inner_lower: InnerParams<S>,
    pub inner_penalty: InnerParams<S>,
    pub config: RunConfig,
    pub constants: ProblemConstants<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct RunReport<S> {
    pub problem: String,
    pub seed: u64,
    pub iterates: Vec<Vec<S>>,
    pub displacements: Vec<S>,
    pub t_out: usize,
    pub x_out: Vec<S>,
    /// Final `ỹ` and `ỹ^λ` estimates.
    pub y_lower: Vec<S>,
    pub y_penalty: Vec<S>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub ledger: PrivacyLedger,
    /// Ledger ε after each completed round.
    pub cumulative_epsilon: Vec<f64>,
    /// Inexactness bound `β` implied by the inner accuracy guarantees.
    pub beta_bound: f64,
    pub warnings: Vec<String>,
    pub params: ResolvedParams<S>,
    pub timing: Timing,
}

impl<S: Real> RunReport<S> {
    /// Tidy per-iteration CSV: `t, displacement, lower/penalty excursion, cumulative ε`.
    pub fn write_trajectory_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "displacement", "lower_max_excursion", "penalty_max_excursion", "estimate_norm", "cumulative_epsilon"])?;
        for (t, d) in self.displacements.iter().enumerate() {
            let diag = self.diagnostics.get(t);
            let ex = |v: Option<&InnerDiagnostics>| v.and_then(|d| d.max_excursion.iter().cloned().reduce(f64::max)).unwrap_or(0.0);
            wr.write_record([
                t.to_string(),
                d.as_f64().to_string(),
                ex(diag.map(|d| &d.lower)).to_string(),
                ex(diag.map(|d| &d.penalty)).to_string(),
                diag.map_or(0.0, |d| d.estimate_norm).to_string(),
                self.cumulative_epsilon.get(t).copied().unwrap_or(0.0).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Inner parameters for the two solves of every outer round.
pub fn derive_pair_params<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    n: usize,
    y0: &[S],
    lambda: S,
    mechanism_budget: PrivacySpend,
    b_in: usize,
    overrides: &InnerOverrides,
) -> Result<(InnerParams<S>, InnerParams<S>)> {
    let c = problem.constants();
    let dom = problem.inner_domain();
    let r0 = dist(y0, &dom.center) + dom.radius;
    let lower =
        derive_inner_params(c.mu_g, c.l0g, n, problem.dim_y(), mechanism_budget.epsilon, mechanism_budget.delta, b_in, r0, overrides)?;
    let mu_pen = lambda * c.mu_g + problem.f_curvature_floor();
    if !(mu_pen > S::zero()) {
        return Err(Error::param("lambda", format!("penalized inner objective not strongly convex (modulus {mu_pen})")));
    }
    let l_pen = c.l0f + lambda * c.l0g;
    let r0_pen = r0 + c.l0f / (lambda * c.mu_g);
    let penalty =
        derive_inner_params(mu_pen, l_pen, n, problem.dim_y(), mechanism_budget.epsilon, mechanism_budget.delta, b_in, r0_pen, overrides)?;
    Ok((lower, penalty))
}

/// The two private inner solves of outer round `t`, run concurrently on
/// disjoint streams.
#[allow(clippy::too_many_arguments)]
pub fn solve_inner_pair<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    data: &Dataset<S>,
    x: &[S],
    y0: &[S],
    lambda: S,
    lower: &InnerParams<S>,
    penalty: &InnerParams<S>,
    seed: u64,
    t: usize,
) -> Result<(crate::inner::InnerOutput<S>, crate::inner::InnerOutput<S>)> {
    let t = t as u64;
    let (lo, pe) = rayon::join(
        || {
            let obj = LowerLevel { problem, data, x };
            let mut noise = stream_rng(seed, StreamKind::InnerLowerNoise, t);
            let mut batch = stream_rng(seed, StreamKind::InnerLowerBatch, t);
            dp_loc_sgd(&obj, y0, lower, &mut noise, &mut batch)
        },
        || {
            let obj = PenalizedLevel { problem, data, x, lambda };
            let mut noise = stream_rng(seed, StreamKind::InnerPenaltyNoise, t);
            let mut batch = stream_rng(seed, StreamKind::InnerPenaltyBatch, t);
            dp_loc_sgd(&obj, y0, penalty, &mut noise, &mut batch)
        },
    );
    Ok((lo?, pe?))
}

fn inner_error_bound<S: Real>(p: &InnerParams<S>) -> f64 {
    p.lipschitz.as_f64() * (p.dim as f64).sqrt() / (p.mu.as_f64() * p.eps_prime * p.n as f64)
}

/// Runs the private bilevel method from `x0`; inner solves start at `y0`.
pub fn run_dp_bilevel<S: Real, P: BilevelProblem<S> + ?Sized>(
    problem: &P,
    data: &Dataset<S>,
    x0: &[S],
    y0: &[S],
    config: &RunConfig,
    params: &OuterParams<S>,
) -> Result<RunReport<S>> {
    let start = Instant::now();
    let n = data.len();
    config.validate(n)?;
    if x0.len() != problem.dim_x() || y0.len() != problem.dim_y() {
        return Err(Error::DimensionMismatch { context: "initial point".into(), expected: problem.dim_x(), got: x0.len() });
    }
    let set = problem.feasible_x();
    if !set.contains(x0) {
        return Err(Error::NotInSet);
    }
    let budget = config.budget()?;
    let b_in = config.batch_in(n);
    let b_out = params.b_out;
    if b_out > n {
        return Err(Error::param("b_out", "exceeds dataset size"));
    }
    let lambda = params.lambda;
    let (lower_p, penalty_p) = derive_pair_params(problem, n, y0, lambda, params.mechanism_budget, b_in, &config.inner)?;

    let mut warnings = params.warnings.clone();
    for w in lower_p.warnings.iter() {
        warnings.push(format!("inner lower: {w}"));
    }
    for w in penalty_p.warnings.iter() {
        warnings.push(format!("inner penalty: {w}"));
    }
    let non_private = params.non_private || lower_p.ledger.is_non_private() || penalty_p.ledger.is_non_private();
    let mut ledger = PrivacyLedger::with_limit(budget);
    if non_private {
        ledger.mark_non_private();
        warnings.push("run is not differentially private".to_string());
    }
    let lower_spend = lower_p.ledger.total()?;
    let penalty_spend = penalty_p.ledger.total()?;
    let gaussian_rule =
        if b_out < n { CompositionRule::AmplifiedAdvanced { batch: b_out, population: n } } else { CompositionRule::Advanced };

    let (l1f, l1g) = (problem.constants().l1f.as_f64(), problem.constants().l1g.as_f64());
    let lam = lambda.as_f64();
    let beta_bound = (l1f + lam * l1g) * inner_error_bound(&penalty_p) + lam * l1g * inner_error_bound(&lower_p);

    let mut diagnostics = Vec::with_capacity(params.iterations);
    let mut cumulative_epsilon = Vec::with_capacity(params.iterations);
    let mut last = (y0.to_vec(), y0.to_vec());
    let seed = config.seed;

    let trace = noisy_prox_descent(
        |t, x| {
            let (lo, pe) = solve_inner_pair(problem, data, x, y0, lambda, &lower_p, &penalty_p, seed, t)?;
            let batch: Option<Vec<usize>> = (b_out < n).then(|| {
                let mut rng = stream_rng(seed, StreamKind::OuterBatch, t as u64);
                (0..b_out).map(|_| rng.random_range(0..n)).collect()
            });
            let est = estimate_hypergradient(problem, data, x, &lo.y, &pe.y, lambda, batch.as_deref(), params.clip)?;
            let batch_deviation = if batch.is_some() && params.overrides.log_batch_deviation {
                let full = estimate_hypergradient(problem, data, x, &lo.y, &pe.y, lambda, None, params.clip)?;
                Some(dist(&est, &full).as_f64())
            } else {
                None
            };
            if !non_private {
                let r = t as u64;
                ledger.record(LedgerEntry::new(
                    format!("inner lower t={t}"),
                    lower_spend.epsilon,
                    lower_spend.delta,
                    CompositionRule::Advanced,
                    r,
                ))?;
                ledger.record(LedgerEntry::new(
                    format!("inner penalty t={t}"),
                    penalty_spend.epsilon,
                    penalty_spend.delta,
                    CompositionRule::Advanced,
                    r,
                ))?;
                let mut e = LedgerEntry::new(format!("outer gaussian t={t}"), 0.0, params.mechanism_budget.delta, gaussian_rule, r);
                if let Some(m) = params.mechanism {
                    e.epsilon = m.epsilon;
                    e.delta = m.delta;
                    e = e.with_mechanism(m);
                }
                let total = ledger.record(e)?;
                cumulative_epsilon.push(total.epsilon);
            } else {
                cumulative_epsilon.push(f64::NAN);
            }
            diagnostics.push(IterationDiagnostics {
                t,
                lower: lo.diagnostics,
                penalty: pe.diagnostics,
                estimate_norm: norm(&est).as_f64(),
                batch_deviation,
            });
            last = (lo.y, pe.y);
            Ok(est)
        },
        set,
        x0,
        params.eta,
        params.sigma2,
        params.iterations,
        seed,
    )?;

    Ok(RunReport {
        problem: problem.name().to_string(),
        seed,
        iterates: trace.iterates,
        displacements: trace.displacements,
        t_out: trace.t_out,
        x_out: trace.x_out,
        y_lower: last.0,
        y_penalty: last.1,
        diagnostics,
        ledger,
        cumulative_epsilon,
        beta_bound,
        warnings,
        params: ResolvedParams {
            outer: params.clone(),
            inner_lower: lower_p,
            inner_penalty: penalty_p,
            config: config.clone(),
            constants: *problem.constants(),
        },
        timing: Timing { wall_clock_seconds: start.elapsed().as_secs_f64() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_constants() -> ProblemConstants<f64> {
        ProblemConstants::new(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn assignment_hand_values() {
        let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
        let p = assign_outer_params(&unit_constants(), 0.1, &budget, 1000, 2, 2, 1000, &OuterOverrides::default()).unwrap();
        assert_relative_eq!(p.lambda, 10.0, max_relative = 1e-12);
        assert_eq!(p.iterations, 100);
        assert_relative_eq!(p.eta, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn alpha_boundary() {
        let c = unit_constants();
        let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
        let (bound, name) = alpha_bound(&c);
        assert_eq!(name, "1/(2*kappa)");
        let o = OuterOverrides::default();
        assert!(assign_outer_params(&c, bound, &budget, 100, 1, 1, 100, &o).is_ok());
        let err = assign_outer_params(&c, bound * (1.0 + 1e-9), &budget, 100, 1, 1, 100, &o).unwrap_err();
        assert!(err.to_string().contains("1/(2*kappa)"), "{err}");
    }

    #[test]
    fn sigma_quarter_when_n_doubles() {
        let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
        let o = OuterOverrides::default();
        let a = assign_outer_params(&unit_constants(), 0.1, &budget, 1000, 1, 1, 1000, &o).unwrap();
        let b = assign_outer_params(&unit_constants(), 0.1, &budget, 2000, 1, 1, 2000, &o).unwrap();
        assert_relative_eq!(b.sigma2 / a.sigma2, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn select_output_ties_first() {
        assert_eq!(select_output(&[0.5, 0.1, 0.3]).unwrap(), 1);
        assert_eq!(select_output(&[0.2, 0.2]).unwrap(), 0);
        assert_eq!(select_output(&[1.0f32; 5]).unwrap(), 0);
        assert!(select_output::<f64>(&[]).is_err());
    }

    #[test]
    fn calibrated_split_fits_budget() {
        let budget = PrivacyBudget::new(2.0, 1e-6).unwrap();
        for t in [1usize, 7, 100] {
            let (_, mech) = split_budget(&budget, t, BudgetSplit::Calibrated).unwrap();
            assert!(round_pattern_total(mech, t).unwrap().fits(&budget));
        }
    }
}
