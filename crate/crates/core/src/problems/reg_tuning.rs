//! Tuning the regularization weight of a linear least-squares model.
//!
//! Upper variable `ω ≥ 0`, lower variable `θ ∈ Θ = B(0, r_θ)`. Records are
//! `[a (p), b, is_val]` with `is_val ∈ {0, 1}`. Per sample
//!
//! * `f_i = v_i (n/n_val) ½(aᵀθ − b)²` (validation loss),
//! * `g_i = (1 − v_i)(n/n_tr) ½(aᵀθ − b)² + ωR(θ) + ε_reg‖θ‖²`,
//!
//! so dataset means give the validation loss and the regularized training loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::ConvexSet;
use crate::inner::{InnerOverrides, InnerParams};
use crate::linalg::{dot, norm, norm_sq, Matrix};
use crate::outer::{
    calibrate_outer_noise, derive_pair_params, select_output, solve_inner_pair, split_budget, BudgetSplit, OuterOverrides, Timing,
};
use crate::privacy::{
    add_gaussian_noise_in_place, stream_rng, CompositionRule, GaussianMechanismParams, LedgerEntry, PrivacyBudget, PrivacyLedger,
    StreamKind,
};
use crate::problem::{BilevelProblem, InnerDomain, OracleKind, ProblemConstants};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    /// `‖θ‖²`
    SquaredNorm,
    /// `√(‖θ‖² + τ²) − τ`, a smooth stand-in for `‖θ‖`.
    Norm { smoothing: f64 },
}

impl Regularizer {
    pub fn value<S: Real>(&self, theta: &[S]) -> S {
        match *self {
            Regularizer::SquaredNorm => norm_sq(theta),
            Regularizer::Norm { smoothing } => {
                let t = S::lit(smoothing);
                (norm_sq(theta) + t * t).sqrt() - t
            }
        }
    }

    pub fn gradient<S: Real>(&self, theta: &[S], out: &mut [S]) {
        match *self {
            Regularizer::SquaredNorm => theta.iter().zip(out.iter_mut()).for_each(|(&t, o)| *o = S::lit(2.0) * t),
            Regularizer::Norm { smoothing } => {
                let t = S::lit(smoothing);
                let r = (norm_sq(theta) + t * t).sqrt();
                theta.iter().zip(out.iter_mut()).for_each(|(&v, o)| *o = v / r);
            }
        }
    }

    pub fn hessian<S: Real>(&self, theta: &[S]) -> Matrix<S> {
        let p = theta.len();
        match *self {
            Regularizer::SquaredNorm => Matrix::scaled_identity(p, S::lit(2.0)),
            Regularizer::Norm { smoothing } => {
                let t = S::lit(smoothing);
                let r = (norm_sq(theta) + t * t).sqrt();
                let mut h = Matrix::scaled_identity(p, S::one() / r);
                let r3 = r * r * r;
                for i in 0..p {
                    for j in 0..p {
                        h.set(i, j, h.get(i, j) - theta[i] * theta[j] / r3);
                    }
                }
                h
            }
        }
    }

    /// Bounds on `‖∇R‖`, `‖∇²R‖` and the third derivative over `B(0, r)`.
    fn derivative_bounds(&self, r: f64) -> (f64, f64, f64) {
        match *self {
            Regularizer::SquaredNorm => (2.0 * r, 2.0, 0.0),
            Regularizer::Norm { smoothing } => (1.0, 1.0 / smoothing, 3.0 / (smoothing * smoothing)),
        }
    }
}

/// Declared bounds and knobs of the tuning problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegTuningSpec {
    pub regularizer: Regularizer,
    pub theta_radius: f64,
    /// Constants are certified for `ω ≤ omega_max`.
    pub omega_max: f64,
    pub feature_bound: f64,
    pub label_bound: f64,
    /// Explicit `ε_reg`; when `None` it is injected only if the training Gram
    /// matrix is singular.
    pub eps_reg: Option<f64>,
    /// Value of `ε_reg` injected for a singular Gram matrix.
    pub fallback_eps_reg: f64,
}

impl Default for RegTuningSpec {
    fn default() -> Self {
        RegTuningSpec {
            regularizer: Regularizer::SquaredNorm,
            theta_radius: 2.0,
            omega_max: 2.0,
            feature_bound: 1.0,
            label_bound: 2.0,
            eps_reg: None,
            fallback_eps_reg: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegTuning<S: Real> {
    p: usize,
    n_train: usize,
    n_val: usize,
    w_train: S,
    w_val: S,
    eps_reg: S,
    curvature_floor: S,
    spec: RegTuningSpec,
    constants: ProblemConstants<S>,
    feasible: ConvexSet<S>,
    domain: InnerDomain<S>,
    notes: Vec<String>,
}

impl<S: Real> RegTuning<S> {
    pub fn new(data: &Dataset<S>, spec: RegTuningSpec) -> Result<Self> {
        if data.record_len() < 3 {
            return Err(Error::Dataset("records must hold at least one feature, a label and a split flag".into()));
        }
        for (name, v) in [
            ("theta_radius", spec.theta_radius),
            ("omega_max", spec.omega_max),
            ("feature_bound", spec.feature_bound),
            ("label_bound", spec.label_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive and finite"));
            }
        }
        if let Regularizer::Norm { smoothing } = spec.regularizer {
            if !(smoothing > 0.0) {
                return Err(Error::param("smoothing", "must be positive"));
            }
        }
        let p = data.record_len() - 2;
        let n = data.len();
        let (mut n_train, mut n_val) = (0usize, 0usize);
        let mut gram = Matrix::<f64>::zeros(p, p);
        let mut rhs = vec![0.0; p];
        for (i, r) in data.records().enumerate() {
            let v = r[p + 1].as_f64();
            let a: Vec<f64> = r[..p].iter().map(|x| x.as_f64()).collect();
            let b = r[p].as_f64();
            if norm(&a) > spec.feature_bound * (1.0 + 1e-12) || b.abs() > spec.label_bound * (1.0 + 1e-12) {
                return Err(Error::Dataset(format!("record {i} exceeds the declared feature or label bound")));
            }
            if v == 1.0 {
                n_val += 1;
            } else if v == 0.0 {
                n_train += 1;
                for j in 0..p {
                    rhs[j] += b * a[j];
                    for k in 0..p {
                        gram.set(j, k, gram.get(j, k) + a[j] * a[k]);
                    }
                }
            } else {
                return Err(Error::Dataset(format!("record {i}: split flag must be 0 or 1")));
            }
        }
        if n_train == 0 || n_val == 0 {
            return Err(Error::Dataset("need at least one training and one validation record".into()));
        }
        let gram = gram.scaled(1.0 / n_train as f64);
        let rhs: Vec<f64> = rhs.iter().map(|v| v / n_train as f64).collect();
        let floor = gram.min_eigenvalue_sym().max(0.0);
        let mut notes = Vec::new();
        let eps_reg = match spec.eps_reg {
            Some(e) => {
                if e < 0.0 {
                    return Err(Error::param("eps_reg", "must be non-negative"));
                }
                e
            }
            None if floor <= 1e-10 * spec.feature_bound.powi(2) => {
                notes.push(format!("training Gram matrix is singular; eps_reg = {} added to both inner objectives", spec.fallback_eps_reg));
                spec.fallback_eps_reg
            }
            None => 0.0,
        };
        let mu = floor + 2.0 * eps_reg;
        if !(mu > 0.0) {
            return Err(Error::param("eps_reg", "inner objective is not strongly convex"));
        }
        // the unregularized training solution must lie in Θ
        let mut reg_gram = gram.clone();
        for j in 0..p {
            reg_gram.set(j, j, reg_gram.get(j, j) + 2.0 * eps_reg);
        }
        let theta0 = reg_gram.cholesky_solve(&rhs)?;
        if norm(&theta0) > spec.theta_radius {
            return Err(Error::param(
                "theta_radius",
                format!("training solution at omega = 0 has norm {:.4}, outside the declared ball", norm(&theta0)),
            ));
        }

        let (w_tr, w_val) = (n as f64 / n_train as f64, n as f64 / n_val as f64);
        let (ab, rt, om) = (spec.feature_bound, spec.theta_radius, spec.omega_max);
        let resid = ab * rt + spec.label_bound;
        let (dr, d2r, d3r) = spec.regularizer.derivative_bounds(rt);
        let l1g = dr + w_tr * ab * ab + om * d2r + 2.0 * eps_reg;
        let constants = ProblemConstants::new(
            S::lit(w_val * resid * ab),
            S::lit(w_val * ab * ab),
            S::lit(w_tr * resid * ab + om * dr + 2.0 * eps_reg * rt),
            S::lit(l1g),
            S::lit((d2r + om * d3r).max(l1g)),
            S::lit(mu),
            S::lit(0.5 * resid * resid),
        )?;
        Ok(RegTuning {
            p,
            n_train,
            n_val,
            w_train: S::lit(w_tr),
            w_val: S::lit(w_val),
            eps_reg: S::lit(eps_reg),
            curvature_floor: S::lit(floor),
            spec,
            constants,
            feasible: ConvexSet::NonnegOrthant { dim: 1 },
            domain: InnerDomain { center: vec![S::zero(); p], radius: S::lit(rt) },
            notes,
        })
    }

    pub fn features(&self) -> usize {
        self.p
    }
    pub fn split_sizes(&self) -> (usize, usize) {
        (self.n_train, self.n_val)
    }
    pub fn eps_reg(&self) -> S {
        self.eps_reg
    }
    pub fn curvature_floor(&self) -> S {
        self.curvature_floor
    }
    pub fn spec(&self) -> &RegTuningSpec {
        &self.spec
    }
    pub fn regularizer(&self) -> Regularizer {
        self.spec.regularizer
    }
    /// Deviations applied while building the problem.
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    /// Ridge solution `θ*(ω)` in closed form (squared-norm regularizer only).
    pub fn ridge_solution(&self, omega: S, data: &Dataset<S>) -> Result<Vec<S>> {
        if self.spec.regularizer != Regularizer::SquaredNorm {
            return Err(Error::Unsupported("closed-form solution needs the squared-norm regularizer".into()));
        }
        let p = self.p;
        let mut h = Matrix::<S>::scaled_identity(p, S::lit(2.0) * (omega + self.eps_reg));
        let mut rhs = vec![S::zero(); p];
        let inv = S::one() / S::from_count(self.n_train);
        for r in data.records().filter(|r| r[p + 1] == S::zero()) {
            for j in 0..p {
                rhs[j] = rhs[j] + inv * r[p] * r[j];
                for k in 0..p {
                    h.set(j, k, h.get(j, k) + inv * r[j] * r[k]);
                }
            }
        }
        h.cholesky_solve(&rhs)
    }

    /// Mean validation loss of `θ`.
    pub fn validation_loss(&self, theta: &[S], data: &Dataset<S>) -> S {
        let p = self.p;
        let total: S = data
            .records()
            .filter(|r| r[p + 1] == S::one())
            .map(|r| {
                let e = dot(&r[..p], theta) - r[p];
                S::lit(0.5) * e * e
            })
            .sum();
        total / S::from_count(self.n_val)
    }

    fn split(&self, r: &[S]) -> (S, S, S) {
        let p = self.p;
        (r[p], r[p + 1], S::one() - r[p + 1])
    }
}

impl<S: Real> BilevelProblem<S> for RegTuning<S> {
    fn name(&self) -> &str {
        "reg_tuning"
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        self.p
    }
    fn record_len(&self) -> usize {
        self.p + 2
    }
    fn constants(&self) -> &ProblemConstants<S> {
        &self.constants
    }
    fn feasible_x(&self) -> &ConvexSet<S> {
        &self.feasible
    }
    fn certified_x(&self) -> ConvexSet<S> {
        ConvexSet::Box { lo: vec![S::zero()], hi: vec![S::lit(self.spec.omega_max)] }
    }
    fn inner_domain(&self) -> InnerDomain<S> {
        self.domain.clone()
    }

    fn per_sample_gradient(&self, which: OracleKind, x: &[S], y: &[S], r: &[S], out: &mut [S]) {
        let p = self.p;
        let (b, v, u) = self.split(r);
        let a = &r[..p];
        let e = dot(a, y) - b;
        match which {
            OracleKind::GradXF => out[0] = S::zero(),
            OracleKind::GradYF => {
                let w = v * self.w_val * e;
                a.iter().zip(out.iter_mut()).for_each(|(&ai, o)| *o = w * ai);
            }
            OracleKind::GradXG => out[0] = self.spec.regularizer.value(y),
            OracleKind::GradYG => {
                self.spec.regularizer.gradient(y, out);
                let w = u * self.w_train * e;
                let two_eps = S::lit(2.0) * self.eps_reg;
                for j in 0..p {
                    out[j] = x[0] * out[j] + w * a[j] + two_eps * y[j];
                }
            }
        }
    }

    fn value_f(&self, _x: &[S], y: &[S], r: &[S]) -> Option<S> {
        let (b, v, _) = self.split(r);
        let e = dot(&r[..self.p], y) - b;
        Some(v * self.w_val * S::lit(0.5) * e * e)
    }

    fn value_g(&self, x: &[S], y: &[S], r: &[S]) -> Option<S> {
        let (b, _, u) = self.split(r);
        let e = dot(&r[..self.p], y) - b;
        Some(u * self.w_train * S::lit(0.5) * e * e + x[0] * self.spec.regularizer.value(y) + self.eps_reg * norm_sq(y))
    }

    fn hessian_yy_g(&self, x: &[S], y: &[S], r: &[S]) -> Option<Matrix<S>> {
        let p = self.p;
        let (_, _, u) = self.split(r);
        let mut h = self.spec.regularizer.hessian(y).scaled(x[0]);
        let w = u * self.w_train;
        for i in 0..p {
            for j in 0..p {
                h.set(i, j, h.get(i, j) + w * r[i] * r[j]);
            }
            h.set(i, i, h.get(i, i) + S::lit(2.0) * self.eps_reg);
        }
        Some(h)
    }

    fn hessian_xy_g(&self, _x: &[S], y: &[S], _r: &[S]) -> Option<Matrix<S>> {
        let mut g = vec![S::zero(); self.p];
        self.spec.regularizer.gradient(y, &mut g);
        Matrix::from_row_major(1, self.p, g).ok()
    }

    fn hessian_yy_f(&self, _x: &[S], _y: &[S], r: &[S]) -> Option<Matrix<S>> {
        let p = self.p;
        let (_, v, _) = self.split(r);
        let w = v * self.w_val;
        let mut h = Matrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                h.set(i, j, w * r[i] * r[j]);
            }
        }
        Some(h)
    }

    fn f_curvature_floor(&self) -> S {
        S::zero()
    }
}

/// Synthetic ridge data. Features are uniform in `B(0, feature_radius)`;
/// training labels are `aᵀθ₀ + noise`, validation labels `shrink · aᵀθ₀ + noise`
/// with noise uniform in `[−noise, noise]`. When the training Gram matrix is
/// close to `gI` the best weight is `ω* ≈ g(1/shrink − 1)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeGenerator {
    pub n: usize,
    pub features: usize,
    pub validation_fraction: f64,
    pub feature_radius: f64,
    pub theta_norm: f64,
    pub shrink: f64,
    pub noise: f64,
}

impl Default for RidgeGenerator {
    fn default() -> Self {
        RidgeGenerator { n: 10_000, features: 2, validation_fraction: 0.5, feature_radius: 1.0, theta_norm: 1.0, shrink: 0.5, noise: 0.1 }
    }
}

impl RidgeGenerator {
    pub fn generate<S: Real>(&self, seed: u64) -> Result<Dataset<S>> {
        if self.n < 2 || self.features == 0 {
            return Err(Error::param("n", "need at least two records and one feature"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::param("validation_fraction", "must lie in (0, 1)"));
        }
        let p = self.features;
        let mut rng = stream_rng(seed, StreamKind::Generator, 1);
        let mut theta: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let tn = norm(&theta);
        theta.iter_mut().for_each(|t| *t *= self.theta_norm / tn);
        let n_val = ((self.n as f64 * self.validation_fraction).round() as usize).clamp(1, self.n - 1);
        let mut values = Vec::with_capacity(self.n * (p + 2));
        for i in 0..self.n {
            let is_val = i >= self.n - n_val;
            let mut a: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let an = norm(&a);
            let u: f64 = rng.random();
            let r = self.feature_radius * u.powf(1.0 / p as f64);
            a.iter_mut().for_each(|v| *v *= r / an);
            let e: f64 = rng.random_range(-1.0..=1.0);
            let signal = dot(&a, &theta);
            let b = if is_val { self.shrink * signal } else { signal } + self.noise * e;
            values.extend(a.iter().map(|&v| S::lit(v)));
            values.push(S::lit(b));
            values.push(if is_val { S::one() } else { S::zero() });
        }
        Dataset::from_flat(p + 2, values)
    }

    /// Label bound implied by the generator.
    pub fn label_bound(&self) -> f64 {
        self.feature_radius * self.theta_norm + self.noise
    }
}

/// `ω_{t+1} = max{0, ω_t − η(λ(R(θ̂^λ) − R(θ̂)) + ν)}`, `ν ~ N(0, σ²)`.
///
/// This is the projected step on `L*_λ`, whose `ω`-derivative is
/// `λ(R(θ^λ) − R(θ*))`. `clip` bounds the un-noised estimate.
#[allow(clippy::too_many_arguments)]
pub fn private_reg_tuning_step<S: Real, R: Rng + ?Sized>(
    omega: S,
    theta_hat: &[S],
    theta_hat_lambda: &[S],
    eta: S,
    lambda: S,
    sigma2: S,
    regularizer: Regularizer,
    clip: Option<S>,
    rng: &mut R,
) -> S {
    let mut g = [lambda * (regularizer.value(theta_hat_lambda) - regularizer.value(theta_hat))];
    if let Some(c) = clip {
        g[0] = g[0].max(-c).min(c);
    }
    add_gaussian_noise_in_place(&mut g, sigma2, rng);
    (omega - eta * g[0]).max(S::zero())
}

/// Settings of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub seed: u64,
    pub omega0: f64,
    pub lambda: f64,
    pub eta: f64,
    pub iterations: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub b_in: Option<usize>,
    /// Uses `noise_scale`, `clip`, `c_lipschitz`, `budget_split` and
    /// `mechanism_epsilon_cap`.
    pub outer: OuterOverrides,
    pub inner: InnerOverrides,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            seed: 0,
            omega0: 0.0,
            lambda: 10.0,
            eta: 0.5,
            iterations: 30,
            epsilon: 1.0,
            delta: 1e-6,
            b_in: None,
            outer: OuterOverrides::default(),
            inner: InnerOverrides::default(),
        }
    }
}

impl TuningConfig {
    /// Zero-noise variant of `self`: noiseless inner and outer steps.
    pub fn noiseless(&self) -> Self {
        let mut c = self.clone();
        c.outer.noise_scale = 0.0;
        c.inner.c_sigma = 0.0;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub omegas: Vec<f64>,
    pub displacements: Vec<f64>,
    pub t_out: usize,
    pub omega_out: f64,
    pub theta: Vec<f64>,
    pub theta_lambda: Vec<f64>,
    pub sigma2: f64,
    pub sensitivity: f64,
    pub mechanism: Option<GaussianMechanismParams>,
    pub inner_lower: InnerParams<f64>,
    pub inner_penalty: InnerParams<f64>,
    pub ledger: PrivacyLedger,
    pub warnings: Vec<String>,
    pub config: TuningConfig,
    pub constants: ProblemConstants<f64>,
    pub timing: Timing,
}

/// Private tuning loop: two private inner trainings and one noisy `ω` step
/// per round, every spend recorded in a ledger capped at `(ε, δ)`.
pub fn run_private_reg_tuning(problem: &RegTuning<f64>, data: &Dataset<f64>, config: &TuningConfig) -> Result<TuningReport> {
    let start = std::time::Instant::now();
    let n = data.len();
    let budget = PrivacyBudget::new(config.epsilon, config.delta)?;
    config.outer.validate()?;
    config.inner.validate()?;
    if !(config.omega0 >= 0.0) {
        return Err(Error::param("omega0", "must be non-negative"));
    }
    if !(config.lambda > 0.0 && config.eta > 0.0) || config.iterations == 0 {
        return Err(Error::param("tuning", "lambda, eta and iterations must be positive"));
    }
    let b_in = config.b_in.unwrap_or(n);
    if b_in == 0 || b_in > n {
        return Err(Error::param("b_in", format!("need 1 <= b_in <= n = {n}")));
    }
    let mut warnings: Vec<String> = problem.notes().to_vec();
    if config.omega0 > problem.spec().omega_max {
        warnings.push("omega0 above omega_max: constants not certified there".into());
    }
    let (_, mech_budget) = split_budget(&budget, config.iterations, config.outer.budget_split)?;
    if config.outer.budget_split == BudgetSplit::Printed {
        warnings.push("printed per-round budget: composed total may exceed (epsilon, delta)".into());
    }
    let theta0 = vec![0.0; problem.features()];
    let (lower_p, penalty_p) = derive_pair_params(problem, n, &theta0, config.lambda, mech_budget, b_in, &config.inner)?;
    warnings.extend(lower_p.warnings.iter().map(|w| format!("inner lower: {w}")));
    warnings.extend(penalty_p.warnings.iter().map(|w| format!("inner penalty: {w}")));

    let c = problem.constants();
    let sensitivity = match config.outer.clip {
        Some(clip) => 2.0 * clip / n as f64,
        None => 2.0 * config.outer.c_lipschitz * c.ell() * c.kappa() / n as f64,
    };
    let (sigma2, mechanism) = calibrate_outer_noise(sensitivity, mech_budget, n, n, &config.outer, &mut warnings)?;

    let non_private = config.outer.noise_scale < 1.0 || lower_p.ledger.is_non_private() || penalty_p.ledger.is_non_private();
    let mut ledger = PrivacyLedger::with_limit(budget);
    if non_private {
        ledger.mark_non_private();
        warnings.push("run is not differentially private".into());
    }
    let lower_spend = lower_p.ledger.total()?;
    let penalty_spend = penalty_p.ledger.total()?;

    let mut omega = config.omega0;
    let mut omegas = vec![omega];
    let mut displacements = Vec::with_capacity(config.iterations);
    let mut last = (theta0.clone(), theta0.clone());
    for t in 0..config.iterations {
        let (lo, pe) = solve_inner_pair(problem, data, &[omega], &theta0, config.lambda, &lower_p, &penalty_p, config.seed, t)?;
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
            if let Some(m) = mechanism {
                ledger.record(
                    LedgerEntry::new(format!("outer gaussian t={t}"), m.epsilon, m.delta, CompositionRule::Advanced, r).with_mechanism(m),
                )?;
            }
        }
        let mut rng = stream_rng(config.seed, StreamKind::OuterNoise, t as u64);
        let next = private_reg_tuning_step(
            omega,
            &lo.y,
            &pe.y,
            config.eta,
            config.lambda,
            sigma2,
            problem.regularizer(),
            config.outer.clip,
            &mut rng,
        );
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("omega at step {}", t + 1)));
        }
        displacements.push((next - omega).abs());
        omega = next;
        omegas.push(omega);
        last = (lo.y, pe.y);
    }
    let t_out = select_output(&displacements)?;
    Ok(TuningReport {
        omega_out: omegas[t_out],
        omegas,
        displacements,
        t_out,
        theta: last.0,
        theta_lambda: last.1,
        sigma2,
        sensitivity,
        mechanism,
        inner_lower: lower_p,
        inner_penalty: penalty_p,
        ledger,
        warnings,
        config: config.clone(),
        constants: *c,
        timing: Timing { wall_clock_seconds: start.elapsed().as_secs_f64() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outer::noisy_prox_descent;
    use approx::assert_relative_eq;

    #[test]
    fn equal_models_give_pure_noise_step() {
        let th = [0.3, 0.4];
        let mut r1 = stream_rng(5, StreamKind::OuterNoise, 0);
        let got = private_reg_tuning_step(1.0, &th, &th, 0.5, 10.0, 0.04, Regularizer::SquaredNorm, None, &mut r1);
        let mut r2 = stream_rng(5, StreamKind::OuterNoise, 0);
        let z: f64 = r2.sample(StandardNormal);
        assert_relative_eq!(got, (1.0 - 0.5 * 0.2 * z).max(0.0), epsilon = 1e-15);
    }

    #[test]
    fn simpler_penalized_model_raises_omega() {
        let mut rng = stream_rng(0, StreamKind::OuterNoise, 0);
        let next = private_reg_tuning_step(0.2, &[1.0], &[0.5], 1.0, 10.0, 0.0, Regularizer::SquaredNorm, None, &mut rng);
        assert!(next > 0.2);
    }

    #[test]
    fn step_matches_generic_prox_descent() {
        let (th, thl) = ([0.8, -0.1], [0.5, 0.2]);
        let (eta, lambda, sigma2, seed) = (0.3, 4.0, 0.5, 11);
        let est = lambda * (Regularizer::SquaredNorm.value(&thl) - Regularizer::SquaredNorm.value(&th));
        let trace = noisy_prox_descent(|_, _| Ok(vec![est]), &ConvexSet::NonnegOrthant { dim: 1 }, &[0.7], eta, sigma2, 25, seed).unwrap();
        let mut omega = 0.7;
        for t in 0..25 {
            let mut rng = stream_rng(seed, StreamKind::OuterNoise, t);
            omega = private_reg_tuning_step(omega, &th, &thl, eta, lambda, sigma2, Regularizer::SquaredNorm, None, &mut rng);
            assert_eq!(omega, trace.iterates[t as usize + 1][0]);
            assert!(omega >= 0.0);
        }
    }

    #[test]
    fn singular_gram_injects_floor() {
        let data = Dataset::from_records(&[vec![1.0, 0.0, 0.5, 0.0], vec![1.0, 0.0, 0.4, 1.0]]).unwrap();
        let p = RegTuning::new(&data, RegTuningSpec::default()).unwrap();
        assert_eq!(p.eps_reg(), 1e-3);
        assert_eq!(p.notes().len(), 1);
    }
}
