//! Localized noisy projected (stochastic) gradient descent for strongly convex
//! finite sums.
//!
//! The solver runs `M` rounds. Round `m` starts at `y_0^m`, takes `T` noisy
//! projected steps with `η_t = 1/(μ(t+1))` inside `B(y_0^m, R_m)`, and hands
//! the uniform average of `y_0^m..y_{T-1}^m` to the next round.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, clip_norm, dist, norm};
use crate::privacy::{
    amplify_by_subsampling, calibrate_gaussian, deamplify, invert_advanced_composition, CompositionRule, GaussianMechanismParams,
    LedgerEntry, PrivacyLedger,
};
use crate::problem::{BilevelProblem, OracleKind};
use crate::scalar::Real;

/// Strongly convex finite sum `h(y) = (1/n) Σ h_i(y)` seen through per-sample gradients.
pub trait InnerObjective<S: Real>: Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    /// Writes `∇h_i(y)` into `out`. `scratch` has length `dim()`.
    fn sample_gradient(&self, i: usize, y: &[S], out: &mut [S], scratch: &mut [S]);
    fn sample_value(&self, _i: usize, _y: &[S]) -> Option<S> {
        None
    }
}

/// Mean gradient over all samples in index order.
pub fn objective_gradient<S: Real, O: InnerObjective<S> + ?Sized>(obj: &O, y: &[S]) -> Vec<S> {
    let d = obj.dim();
    let mut acc = vec![S::zero(); d];
    let mut buf = vec![S::zero(); d];
    let mut scratch = vec![S::zero(); d];
    for i in 0..obj.len() {
        obj.sample_gradient(i, y, &mut buf, &mut scratch);
        acc.iter_mut().zip(&buf).for_each(|(a, &b)| *a = *a + b);
    }
    let inv = S::one() / S::from_count(obj.len());
    acc.iter_mut().for_each(|a| *a = *a * inv);
    acc
}

pub fn objective_value<S: Real, O: InnerObjective<S> + ?Sized>(obj: &O, y: &[S]) -> Option<S> {
    let mut acc = S::zero();
    for i in 0..obj.len() {
        acc = acc + obj.sample_value(i, y)?;
    }
    Some(acc / S::from_count(obj.len()))
}

/// `y ↦ g(x, y)` for fixed `x`.
pub struct LowerLevel<'a, S: Real, P: BilevelProblem<S> + ?Sized> {
    pub problem: &'a P,
    pub data: &'a Dataset<S>,
    pub x: &'a [S],
}

impl<S: Real, P: BilevelProblem<S> + ?Sized> InnerObjective<S> for LowerLevel<'_, S, P> {
    fn dim(&self) -> usize {
        self.problem.dim_y()
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn sample_gradient(&self, i: usize, y: &[S], out: &mut [S], _scratch: &mut [S]) {
        self.problem.per_sample_gradient(OracleKind::GradYG, self.x, y, self.data.record(i), out);
    }
    fn sample_value(&self, i: usize, y: &[S]) -> Option<S> {
        self.problem.value_g(self.x, y, self.data.record(i))
    }
}

/// `y ↦ f(x, y) + λ g(x, y)` for fixed `x`.
pub struct PenalizedLevel<'a, S: Real, P: BilevelProblem<S> + ?Sized> {
    pub problem: &'a P,
    pub data: &'a Dataset<S>,
    pub x: &'a [S],
    pub lambda: S,
}

impl<S: Real, P: BilevelProblem<S> + ?Sized> InnerObjective<S> for PenalizedLevel<'_, S, P> {
    fn dim(&self) -> usize {
        self.problem.dim_y()
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn sample_gradient(&self, i: usize, y: &[S], out: &mut [S], scratch: &mut [S]) {
        let r = self.data.record(i);
        self.problem.per_sample_gradient(OracleKind::GradYF, self.x, y, r, out);
        self.problem.per_sample_gradient(OracleKind::GradYG, self.x, y, r, scratch);
        out.iter_mut().zip(scratch.iter()).for_each(|(o, &s)| *o = *o + self.lambda * s);
    }
    fn sample_value(&self, i: usize, y: &[S]) -> Option<S> {
        let r = self.data.record(i);
        Some(self.problem.value_f(self.x, y, r)? + self.lambda * self.problem.value_g(self.x, y, r)?)
    }
}

/// `h_i(y) = ½ Σ_j c_j (y_j − z_ij)²` with records `z_i`.
pub struct QuadraticSum<'a, S> {
    pub curvature: Vec<S>,
    pub data: &'a Dataset<S>,
}

impl<S: Real> InnerObjective<S> for QuadraticSum<'_, S> {
    fn dim(&self) -> usize {
        self.curvature.len()
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn sample_gradient(&self, i: usize, y: &[S], out: &mut [S], _scratch: &mut [S]) {
        let z = self.data.record(i);
        for j in 0..y.len() {
            out[j] = self.curvature[j] * (y[j] - z[j]);
        }
    }
    fn sample_value(&self, i: usize, y: &[S]) -> Option<S> {
        let z = self.data.record(i);
        Some((0..y.len()).map(|j| S::lit(0.5) * self.curvature[j] * (y[j] - z[j]).powi(2)).sum())
    }
}

/// `h_i(y) = (μ/2)‖y − z_i‖² + Σ_j huber_τ(y_j − z_ij)`, a smooth non-quadratic
/// strongly convex sum.
pub struct HuberSum<'a, S> {
    pub mu: S,
    pub tau: S,
    pub data: &'a Dataset<S>,
}

impl<S: Real> InnerObjective<S> for HuberSum<'_, S> {
    fn dim(&self) -> usize {
        self.data.record_len()
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn sample_gradient(&self, i: usize, y: &[S], out: &mut [S], _scratch: &mut [S]) {
        let z = self.data.record(i);
        for j in 0..y.len() {
            let r = y[j] - z[j];
            let h = if r.abs() <= self.tau { r / self.tau } else { r.signum() };
            out[j] = self.mu * r + h;
        }
    }
    fn sample_value(&self, i: usize, y: &[S]) -> Option<S> {
        let z = self.data.record(i);
        let half = S::lit(0.5);
        Some(
            (0..y.len())
                .map(|j| {
                    let r = y[j] - z[j];
                    let h = if r.abs() <= self.tau { half * r * r / self.tau } else { r.abs() - half * self.tau };
                    half * self.mu * r * r + h
                })
                .sum(),
        )
    }
}

/// Explicit constants for the inner parameter assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerOverrides {
    /// Multiplier in the radius recurrence.
    pub c_r: f64,
    /// Multiplier on the calibrated noise variance; `0` disables noise.
    pub c_sigma: f64,
    /// Upper bound on iterations per round (the assignment asks for `n²`).
    pub t_cap: usize,
    pub rounds: Option<usize>,
    pub iterations: Option<usize>,
    /// Clip per-sample gradients at the declared Lipschitz constant.
    pub clip: bool,
    /// Per-step mechanisms are calibrated at no more than this ε.
    pub mechanism_epsilon_cap: f64,
}

impl Default for InnerOverrides {
    fn default() -> Self {
        InnerOverrides {
            c_r: 1.0,
            c_sigma: 1.0,
            t_cap: 1_000_000,
            rounds: None,
            iterations: None,
            clip: true,
            mechanism_epsilon_cap: 0.999,
        }
    }
}

impl InnerOverrides {
    pub fn noiseless() -> Self {
        InnerOverrides { c_sigma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_r > 0.0) {
            return Err(Error::param("inner.c_r", "must be positive"));
        }
        if !(self.c_sigma >= 0.0) {
            return Err(Error::param("inner.c_sigma", "must be non-negative"));
        }
        if self.t_cap == 0 || self.rounds == Some(0) || self.iterations == Some(0) {
            return Err(Error::param("inner", "round and iteration counts must be positive"));
        }
        if !(self.mechanism_epsilon_cap > 0.0 && self.mechanism_epsilon_cap < 1.0) {
            return Err(Error::param("inner.mechanism_epsilon_cap", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct InnerParams<S> {
    pub rounds: usize,
    pub iterations: usize,
    pub sigma2: S,
    pub radii: Vec<S>,
    pub mu: S,
    pub lipschitz: S,
    pub eps_prime: f64,
    pub delta_prime: f64,
    pub batch: usize,
    pub n: usize,
    pub dim: usize,
    pub clip: Option<S>,
    pub mechanism: Option<GaussianMechanismParams>,
    /// Spend of one solve, one entry standing for all `M·T` steps.
    pub ledger: PrivacyLedger,
    pub warnings: Vec<String>,
    pub overrides: InnerOverrides,
}

impl<S: Real> InnerParams<S> {
    #[inline]
    pub fn step_size(&self, t: usize) -> S {
        S::one() / (self.mu * S::from_count(t + 1))
    }

    pub fn total_steps(&self) -> u64 {
        (self.rounds as u64) * (self.iterations as u64)
    }
}

/// Number of localization rounds: `ceil(log2(ln(μ ε' n / L)))`, at least 1.
pub fn localization_rounds(mu: f64, lipschitz: f64, n: usize, eps_prime: f64) -> usize {
    let arg = mu * eps_prime * n as f64 / lipschitz;
    let inner = arg.ln();
    if !(inner > 1.0) {
        return 1;
    }
    (inner.log2().ceil() as usize).max(1)
}

/// `R_{m+1} = C_R (sqrt(R_m L/(μ ε' n)) + L sqrt(d)/(μ ε' n))`, `R_0` given.
pub fn radius_schedule(r0: f64, rounds: usize, mu: f64, lipschitz: f64, n: usize, dim: usize, eps_prime: f64, c_r: f64) -> Vec<f64> {
    let a = lipschitz / (mu * eps_prime * n as f64);
    let mut radii = Vec::with_capacity(rounds);
    let mut r = r0;
    for _ in 0..rounds {
        radii.push(r);
        r = c_r * ((r * a).sqrt() + a * (dim as f64).sqrt());
    }
    radii
}

/// Parameter assignment for one `(ε', δ')` inner solve.
#[allow(clippy::too_many_arguments)]
pub fn derive_inner_params<S: Real>(
    mu: S,
    lipschitz: S,
    n: usize,
    dim: usize,
    eps_prime: f64,
    delta_prime: f64,
    batch: usize,
    r0: S,
    overrides: &InnerOverrides,
) -> Result<InnerParams<S>> {
    overrides.validate()?;
    let (mu_f, l_f, r0_f) = (mu.as_f64(), lipschitz.as_f64(), r0.as_f64());
    if !(mu_f > 0.0) || !(l_f > 0.0) || !(r0_f > 0.0) {
        return Err(Error::param("inner", format!("mu, L and R0 must be positive (mu={mu_f}, L={l_f}, R0={r0_f})")));
    }
    if n == 0 || dim == 0 {
        return Err(Error::param("inner", "n and dim must be positive"));
    }
    if batch == 0 || batch > n {
        return Err(Error::param("b_in", format!("need 1 <= b_in <= n, got {batch}")));
    }
    if !(eps_prime > 0.0) || !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(Error::param("inner budget", format!("invalid (eps', delta') = ({eps_prime}, {delta_prime})")));
    }
    let mut warnings = Vec::new();
    if dim >= 2 {
        let required = l_f * r0_f.powf(2.0 / (dim as f64).ln()) / (mu_f * eps_prime);
        if (n as f64) < required {
            return Err(Error::SampleSize { required, n });
        }
    } else {
        warnings.push("sample-size condition skipped: undefined for d_y = 1".to_string());
    }

    let rounds = overrides.rounds.unwrap_or_else(|| localization_rounds(mu_f, l_f, n, eps_prime));
    let iterations = match overrides.iterations {
        Some(t) => t,
        None => {
            let full = (n as u128 * n as u128).min(usize::MAX as u128) as usize;
            if full > overrides.t_cap {
                warnings.push(format!("iterations per round capped at {} (assignment asks for n^2 = {full})", overrides.t_cap));
                overrides.t_cap
            } else {
                full
            }
        }
    };
    let radii = radius_schedule(r0_f, rounds, mu_f, l_f, n, dim, eps_prime, overrides.c_r).into_iter().map(S::lit).collect();

    let k = rounds as u64 * iterations as u64;
    let mut ledger = PrivacyLedger::new();
    let mut mechanism = None;
    let mut sigma2 = S::zero();
    if overrides.c_sigma == 0.0 {
        ledger.mark_non_private();
        warnings.push("inner noise disabled: no privacy guarantee".to_string());
    } else {
        let adv = invert_advanced_composition(eps_prime, delta_prime, k)?;
        let mut basic_eps = eps_prime / k as f64;
        while basic_eps * k as f64 > eps_prime {
            basic_eps *= 1.0 - 1e-12;
        }
        let (step_eps, step_delta) = if basic_eps > adv.epsilon { (basic_eps, delta_prime / k as f64) } else { (adv.epsilon, adv.delta) };
        let amplified = batch < n;
        let mut mech_eps = if amplified { deamplify(step_eps, batch, n)? } else { step_eps };
        if mech_eps >= overrides.mechanism_epsilon_cap {
            warnings
                .push(format!("per-step epsilon {mech_eps:.4} reduced to {} (Gaussian mechanism range)", overrides.mechanism_epsilon_cap));
            mech_eps = overrides.mechanism_epsilon_cap;
        }
        let sensitivity = 2.0 * l_f / batch as f64;
        let mech = calibrate_gaussian(sensitivity, mech_eps, step_delta)?;
        if overrides.c_sigma < 1.0 {
            ledger.mark_non_private();
            warnings.push("inner noise multiplier below 1: no privacy guarantee".to_string());
        }
        sigma2 = S::lit(mech.sigma2 * overrides.c_sigma);
        let rule = if amplified { CompositionRule::AmplifiedAdvanced { batch, population: n } } else { CompositionRule::Advanced };
        ledger.record(LedgerEntry::new("inner step", mech_eps, step_delta, rule, 0).repeated(k).with_mechanism(mech))?;
        debug_assert!(amplify_by_subsampling(mech_eps, step_delta, batch, n).is_ok());
        mechanism = Some(mech);
    }

    Ok(InnerParams {
        rounds,
        iterations,
        sigma2,
        radii,
        mu,
        lipschitz,
        eps_prime,
        delta_prime,
        batch,
        n,
        dim,
        clip: if overrides.clip { Some(lipschitz) } else { None },
        mechanism,
        ledger,
        warnings,
        overrides: overrides.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InnerDiagnostics {
    pub rounds: usize,
    pub iterations: usize,
    /// Per round, the largest `‖y_t^m − y_0^m‖` reached.
    pub max_excursion: Vec<f64>,
    pub radii: Vec<f64>,
    pub clipped: u64,
    pub gradient_evaluations: u64,
}

impl InnerDiagnostics {
    /// True when every iterate stayed inside its round ball (up to `tol`).
    pub fn respects_balls(&self, tol: f64) -> bool {
        self.max_excursion.iter().zip(&self.radii).all(|(e, r)| *e <= r + tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct InnerOutput<S> {
    pub y: Vec<S>,
    pub diagnostics: InnerDiagnostics,
}

/// Mini-batch localized solver. With `params.batch == n` every step uses the
/// full batch in index order and no sampling randomness is consumed.
pub fn dp_loc_sgd<S, O, R1, R2>(
    objective: &O,
    y0: &[S],
    params: &InnerParams<S>,
    noise_rng: &mut R1,
    batch_rng: &mut R2,
) -> Result<InnerOutput<S>>
where
    S: Real,
    O: InnerObjective<S> + ?Sized,
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let d = objective.dim();
    let n = objective.len();
    if y0.len() != d {
        return Err(Error::DimensionMismatch { context: "inner y0".into(), expected: d, got: y0.len() });
    }
    if params.batch == 0 || params.batch > n || params.radii.len() != params.rounds {
        return Err(Error::param("inner params", "batch size or radius schedule inconsistent with objective"));
    }
    let full = params.batch == n;
    let sigma = params.sigma2.as_f64().sqrt();
    let inv_b = S::one() / S::from_count(params.batch);

    let mut center = y0.to_vec();
    let mut y = vec![S::zero(); d];
    let mut avg = vec![S::zero(); d];
    let mut grad = vec![S::zero(); d];
    let mut buf = vec![S::zero(); d];
    let mut scratch = vec![S::zero(); d];
    let mut diag = InnerDiagnostics {
        rounds: params.rounds,
        iterations: params.iterations,
        radii: params.radii.iter().map(|r| r.as_f64()).collect(),
        ..Default::default()
    };

    for m in 0..params.rounds {
        let radius = params.radii[m];
        y.copy_from_slice(&center);
        avg.iter_mut().for_each(|a| *a = S::zero());
        let mut excursion = S::zero();
        for t in 0..params.iterations {
            avg.iter_mut().zip(&y).for_each(|(a, &v)| *a = *a + v);
            grad.iter_mut().for_each(|g| *g = S::zero());
            for k in 0..params.batch {
                let i = if full { k } else { batch_rng.random_range(0..n) };
                objective.sample_gradient(i, &y, &mut buf, &mut scratch);
                if let Some(c) = params.clip {
                    if clip_norm(&mut buf, c) {
                        diag.clipped += 1;
                    }
                }
                grad.iter_mut().zip(&buf).for_each(|(g, &b)| *g = *g + b);
            }
            diag.gradient_evaluations += params.batch as u64;
            if !all_finite(&grad) {
                return Err(Error::NonFinite(format!("inner gradient (round {m}, step {t})")));
            }
            let eta = params.step_size(t);
            for j in 0..d {
                let mut g = grad[j] * inv_b;
                if sigma > 0.0 {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    g = g + S::lit(sigma * z);
                }
                y[j] = y[j] - eta * g;
            }
            let r = dist(&y, &center);
            if r > radius {
                let s = radius / r;
                for j in 0..d {
                    y[j] = center[j] + (y[j] - center[j]) * s;
                }
            }
            excursion = excursion.max(dist(&y, &center));
        }
        diag.max_excursion.push(excursion.as_f64());
        let inv_t = S::one() / S::from_count(params.iterations);
        center.iter_mut().zip(&avg).for_each(|(c, &a)| *c = a * inv_t);
        if !all_finite(&center) {
            return Err(Error::NonFinite(format!("inner average (round {m})")));
        }
    }
    Ok(InnerOutput { y: center, diagnostics: diag })
}

/// Full-batch variant; `params.batch` must equal the number of samples.
pub fn dp_loc_gd<S, O, R>(objective: &O, y0: &[S], params: &InnerParams<S>, rng: &mut R) -> Result<InnerOutput<S>>
where
    S: Real,
    O: InnerObjective<S> + ?Sized,
    R: Rng + ?Sized,
{
    if params.batch != objective.len() {
        return Err(Error::param("b_in", "full-batch solver requires b_in = n"));
    }
    // never drawn from: a full batch consumes no sampling randomness
    let mut unused = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    dp_loc_sgd(objective, y0, params, rng, &mut unused)
}

/// Per-sample gradient norm bound check used by tests and diagnostics.
pub fn max_sample_gradient_norm<S: Real, O: InnerObjective<S> + ?Sized>(obj: &O, y: &[S]) -> S {
    let d = obj.dim();
    let mut buf = vec![S::zero(); d];
    let mut scratch = vec![S::zero(); d];
    let mut m = S::zero();
    for i in 0..obj.len() {
        obj.sample_gradient(i, y, &mut buf, &mut scratch);
        m = m.max(norm(&buf));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::{stream_rng, StreamKind};
    use approx::assert_relative_eq;

    #[test]
    fn rounds_hand_value() {
        assert_eq!(localization_rounds(1.0, 1.0, 10_000, 1.0), 4);
        assert_eq!(localization_rounds(1.0, 1.0, 2, 1.0), 1);
    }

    #[test]
    fn noiseless_one_dimensional_quadratic() {
        let data = Dataset::from_records(&[vec![2.0], vec![4.0]]).unwrap();
        let obj = QuadraticSum { curvature: vec![1.0], data: &data };
        let over = InnerOverrides { rounds: Some(1), iterations: Some(200_000), ..InnerOverrides::noiseless() };
        let p: InnerParams<f64> = derive_inner_params(1.0, 10.0, 2, 1, 1.0, 1e-6, 2, 10.0, &over).unwrap();
        assert_eq!(p.sigma2, 0.0);
        let mut rng = stream_rng(1, StreamKind::Experiment, 0);
        let out = dp_loc_gd(&obj, &[0.0], &p, &mut rng).unwrap();
        assert!((out.y[0] - 3.0).abs() < 1e-4, "{:?}", out.y);
    }

    #[test]
    fn ledger_spends_exactly_inner_budget() {
        let p = derive_inner_params(1.0, 2.0, 4096, 10, 0.8, 1e-7, 64, 1.0, &InnerOverrides { t_cap: 500, ..Default::default() }).unwrap();
        let t = p.ledger.total().unwrap();
        assert!(t.epsilon <= 0.8 && t.delta <= 1e-7);
        assert_relative_eq!(t.epsilon, 0.8, max_relative = 1e-9);
        assert_relative_eq!(t.delta, 1e-7, max_relative = 1e-9);
        assert!(p.warnings.iter().any(|w| w.contains("capped")));
    }

    #[test]
    fn sample_size_condition_enforced() {
        let err = derive_inner_params(1.0, 100.0, 10, 4, 0.1, 1e-6, 10, 5.0, &InnerOverrides::default()).unwrap_err();
        assert!(matches!(err, Error::SampleSize { .. }), "{err}");
    }
}
