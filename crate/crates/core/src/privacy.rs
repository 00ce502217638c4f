//! Gaussian mechanism, composition, subsampling amplification and a spend ledger.
//!
//! Accounting is done in `f64` regardless of the solver scalar type.
//!
//! # Randomness
//!
//! Every noise source draws from its own ChaCha20 stream (`rand_chacha`):
//! `ChaCha20Rng::seed_from_u64(seed)` followed by
//! `set_stream((kind << 48) | index)`, see [`stream_rng`]. Gaussian variates are
//! produced in `f64` by `rand_distr::StandardNormal` (ziggurat) and scaled by
//! `σ` before conversion to the solver scalar. Both algorithms are portable, so
//! a seed pins the exact noise sequence on every platform.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A target `(ε, δ)` with `ε > 0` and `δ ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::param("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// An `(ε, δ)` spend. Unlike [`PrivacyBudget`] it may be zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacySpend {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        PrivacySpend { epsilon, delta }
    }

    pub fn fits(&self, budget: &PrivacyBudget) -> bool {
        self.epsilon <= budget.epsilon && self.delta <= budget.delta
    }
}

/// A calibrated Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMechanismParams {
    pub sensitivity: f64,
    pub sigma2: f64,
    pub epsilon: f64,
    pub delta: f64,
}

fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must lie in (0, 1) for the Gaussian mechanism bound, got {v}")))
    }
}

/// Smallest `σ²` with `σ² ≥ 2 ln(1.25/δ) S² / ε²`.
pub fn calibrate_gaussian(sensitivity: f64, epsilon: f64, delta: f64) -> Result<GaussianMechanismParams> {
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(Error::param("sensitivity", format!("must be positive, got {sensitivity}")));
    }
    check_unit_open("epsilon", epsilon)?;
    check_unit_open("delta", delta)?;
    let sigma2 = 2.0 * (1.25 / delta).ln() * sensitivity * sensitivity / (epsilon * epsilon);
    Ok(GaussianMechanismParams { sensitivity, sigma2, epsilon, delta })
}

/// Adds independent `N(0, σ²)` noise to every coordinate in place.
pub fn add_gaussian_noise_in_place<S: Real, R: Rng + ?Sized>(v: &mut [S], sigma2: S, rng: &mut R) {
    if sigma2 <= S::zero() {
        return;
    }
    let sigma = sigma2.as_f64().sqrt();
    for x in v.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = *x + S::lit(sigma * z);
    }
}

/// `v + N(0, σ² I)`.
pub fn add_gaussian_noise<S: Real, R: Rng + ?Sized>(v: &[S], sigma2: S, rng: &mut R) -> Vec<S> {
    let mut out = v.to_vec();
    add_gaussian_noise_in_place(&mut out, sigma2, rng);
    out
}

/// T-fold advanced composition of `(ε0, δ0)` mechanisms.
pub fn advanced_composition(epsilon0: f64, delta0: f64, t: u64) -> Result<PrivacySpend> {
    if !(epsilon0 < 1.0) || epsilon0 < 0.0 {
        return Err(Error::param("epsilon0", format!("advanced composition requires 0 <= epsilon0 < 1, got {epsilon0}")));
    }
    if !(delta0 > 0.0 && delta0 < 1.0) {
        return Err(Error::param("delta0", format!("must lie in (0, 1), got {delta0}")));
    }
    if t == 0 {
        return Err(Error::param("T", "must be at least 1"));
    }
    let tf = t as f64;
    let epsilon = (2.0 * tf * (1.0 / delta0).ln()).sqrt() * epsilon0 + 2.0 * tf * epsilon0 * epsilon0;
    Ok(PrivacySpend { epsilon, delta: (tf + 1.0) * delta0 })
}

fn sampling_probability(b: usize, n: usize) -> f64 {
    // 1 - (1 - 1/n)^b, computed without cancellation
    -((b as f64) * (-1.0 / n as f64).ln_1p()).exp_m1()
}

/// Privacy of running an `(ε0, δ0)` mechanism on a with-replacement sample of
/// `b` out of `n` records.
pub fn amplify_by_subsampling(epsilon0: f64, delta0: f64, b: usize, n: usize) -> Result<PrivacySpend> {
    if b == 0 || b > n {
        return Err(Error::param("b", format!("need 1 <= b <= n, got b = {b}, n = {n}")));
    }
    let q = sampling_probability(b, n);
    Ok(PrivacySpend { epsilon: (q * epsilon0.exp_m1()).ln_1p(), delta: delta0 })
}

/// Largest base `ε0` whose amplified privacy is `epsilon`.
pub fn deamplify(epsilon: f64, b: usize, n: usize) -> Result<f64> {
    if b == 0 || b > n {
        return Err(Error::param("b", format!("need 1 <= b <= n, got b = {b}, n = {n}")));
    }
    let q = sampling_probability(b, n);
    let mut e0 = (epsilon.exp_m1() / q).ln_1p();
    while amplify_by_subsampling(e0, 0.5, b, n)?.epsilon > epsilon {
        e0 *= 1.0 - 1e-12;
    }
    Ok(e0)
}

/// Largest `ε0` (with `δ0 = δ/(k+1)`) whose k-fold advanced composition fits `(ε, δ)`.
pub fn invert_advanced_composition(epsilon: f64, delta: f64, k: u64) -> Result<PrivacySpend> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    PrivacyBudget::new(epsilon, delta)?;
    let kf = k as f64;
    let delta0 = delta / (kf + 1.0);
    let a = (2.0 * kf * (1.0 / delta0).ln()).sqrt();
    let mut e0 = (-a + (a * a + 8.0 * kf * epsilon).sqrt()) / (4.0 * kf);
    e0 = e0.min(1.0 - 1e-12);
    while advanced_composition(e0, delta0, k)?.epsilon > epsilon {
        e0 *= 1.0 - 1e-12;
    }
    Ok(PrivacySpend { epsilon: e0, delta: delta0 })
}

/// How an entry combines with the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompositionRule {
    /// Summed with every other basic entry.
    Basic,
    /// Basic-summed within its round, rounds combined by advanced composition.
    Advanced,
    /// Amplified by sampling `batch` of `population` first, then as `Advanced`.
    AmplifiedAdvanced { batch: usize, population: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
    pub rule: CompositionRule,
    /// Entries sharing a round are basic-composed before advanced composition.
    pub round: u64,
    /// The entry stands for this many consecutive rounds of identical spend.
    pub repeats: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<GaussianMechanismParams>,
}

impl LedgerEntry {
    pub fn new(label: impl Into<String>, epsilon: f64, delta: f64, rule: CompositionRule, round: u64) -> Self {
        LedgerEntry { label: label.into(), epsilon, delta, rule, round, repeats: 1, mechanism: None }
    }

    pub fn repeated(mut self, repeats: u64) -> Self {
        self.repeats = repeats.max(1);
        self
    }

    pub fn with_mechanism(mut self, m: GaussianMechanismParams) -> Self {
        self.mechanism = Some(m);
        self
    }

    /// Per-round spend after any amplification.
    pub fn effective(&self) -> Result<PrivacySpend> {
        match self.rule {
            CompositionRule::AmplifiedAdvanced { batch, population } => amplify_by_subsampling(self.epsilon, self.delta, batch, population),
            _ => Ok(PrivacySpend::new(self.epsilon, self.delta)),
        }
    }
}

/// Ordered record of every privacy-consuming step of a run.
///
/// The total is never stored: every query folds the entries in order. For the
/// advanced part the fold takes whichever of advanced or basic composition gives
/// the smaller ε, and keeps a running componentwise maximum so the total never
/// decreases as entries are appended.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "LedgerSnapshot", try_from = "LedgerSnapshot")]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
    limit: Option<PrivacyBudget>,
    non_private: bool,
}

#[derive(Serialize, Deserialize)]
struct LedgerSnapshot {
    entries: Vec<LedgerEntry>,
    total: PrivacySpend,
    limit: Option<PrivacyBudget>,
    non_private: bool,
}

impl From<PrivacyLedger> for LedgerSnapshot {
    fn from(l: PrivacyLedger) -> Self {
        let total = l.total().unwrap_or_default();
        LedgerSnapshot { entries: l.entries, total, limit: l.limit, non_private: l.non_private }
    }
}

impl TryFrom<LedgerSnapshot> for PrivacyLedger {
    type Error = Error;
    fn try_from(s: LedgerSnapshot) -> Result<Self> {
        // the serialized total is informational; it is recomputed on demand
        Ok(PrivacyLedger { entries: s.entries, limit: s.limit, non_private: s.non_private })
    }
}

#[derive(Default)]
struct Fold {
    basic: PrivacySpend,
    rounds: BTreeMap<u64, PrivacySpend>,
    extra_rounds: u64,
    adv_sum: PrivacySpend,
    max_eps: f64,
    max_delta: f64,
    total: PrivacySpend,
}

impl Fold {
    fn push(&mut self, e: &LedgerEntry) -> Result<()> {
        let eff = e.effective()?;
        let r = e.repeats.max(1) as f64;
        match e.rule {
            CompositionRule::Basic => {
                self.basic.epsilon += r * eff.epsilon;
                self.basic.delta += r * eff.delta;
            }
            _ => {
                if e.repeats > 1 {
                    self.extra_rounds += e.repeats;
                    self.max_eps = self.max_eps.max(eff.epsilon);
                    self.max_delta = self.max_delta.max(eff.delta);
                } else {
                    let slot = self.rounds.entry(e.round).or_default();
                    slot.epsilon += eff.epsilon;
                    slot.delta += eff.delta;
                    self.max_eps = self.max_eps.max(slot.epsilon);
                    self.max_delta = self.max_delta.max(slot.delta);
                }
                self.adv_sum.epsilon += r * eff.epsilon;
                self.adv_sum.delta += r * eff.delta;
            }
        }
        let k = self.rounds.len() as u64 + self.extra_rounds;
        let mut part = self.adv_sum;
        if k > 0 && self.max_eps < 1.0 && self.max_delta > 0.0 && self.max_delta < 1.0 {
            let adv = advanced_composition(self.max_eps, self.max_delta, k)?;
            if adv.epsilon < part.epsilon || (adv.epsilon == part.epsilon && adv.delta < part.delta) {
                part = adv;
            }
        }
        let candidate = PrivacySpend::new(self.basic.epsilon + part.epsilon, self.basic.delta + part.delta);
        self.total.epsilon = self.total.epsilon.max(candidate.epsilon);
        self.total.delta = self.total.delta.max(candidate.delta);
        Ok(())
    }
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger that refuses entries pushing the total over `limit`.
    pub fn with_limit(limit: PrivacyBudget) -> Self {
        PrivacyLedger { limit: Some(limit), ..Self::default() }
    }

    /// Ledger holding `entries` as given, without limit checks.
    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        PrivacyLedger { entries, ..Self::default() }
    }

    /// Marks the run as carrying no privacy guarantee (noise disabled).
    pub fn mark_non_private(&mut self) {
        self.non_private = true;
    }

    pub fn is_non_private(&self) -> bool {
        self.non_private
    }

    pub fn limit(&self) -> Option<PrivacyBudget> {
        self.limit
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> Result<PrivacySpend> {
        let mut fold = Fold::default();
        for e in &self.entries {
            fold.push(e)?;
        }
        Ok(fold.total)
    }

    /// Totals after each entry, in order.
    pub fn running_totals(&self) -> Result<Vec<PrivacySpend>> {
        let mut fold = Fold::default();
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            fold.push(e)?;
            out.push(fold.total);
        }
        Ok(out)
    }

    /// Appends an entry unless it would exceed the configured hard limit.
    pub fn record(&mut self, entry: LedgerEntry) -> Result<PrivacySpend> {
        if !(entry.epsilon >= 0.0) || !(entry.delta >= 0.0) {
            return Err(Error::param("ledger entry", "epsilon and delta must be non-negative"));
        }
        self.entries.push(entry);
        let total = match self.total() {
            Ok(t) => t,
            Err(e) => {
                self.entries.pop();
                return Err(e);
            }
        };
        if let Some(limit) = self.limit {
            if !self.non_private && !total.fits(&limit) {
                self.entries.pop();
                return Err(Error::BudgetExceeded {
                    epsilon: total.epsilon,
                    delta: total.delta,
                    limit_epsilon: limit.epsilon,
                    limit_delta: limit.delta,
                });
            }
        }
        Ok(total)
    }

    pub fn record_basic(&mut self, label: &str, epsilon: f64, delta: f64) -> Result<PrivacySpend> {
        self.record(LedgerEntry::new(label, epsilon, delta, CompositionRule::Basic, 0))
    }
}

/// Logical noise sources; each gets a disjoint ChaCha20 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamKind {
    OuterNoise = 1,
    OuterBatch = 2,
    InnerLowerNoise = 3,
    InnerLowerBatch = 4,
    InnerPenaltyNoise = 5,
    InnerPenaltyBatch = 6,
    Generator = 7,
    Experiment = 8,
}

/// Independent generator for `(kind, index)` under a master seed.
pub fn stream_rng(seed: u64, kind: StreamKind, index: u64) -> ChaCha20Rng {
    debug_assert!(index < (1u64 << 48));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 48) | (index & ((1u64 << 48) - 1)));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn calibration_hand_values() {
        let p = calibrate_gaussian(1.0, 0.5, 1e-5).unwrap();
        assert_relative_eq!(p.sigma2, 8.0 * 1.25e5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(p.sigma2, 93.887, max_relative = 1e-4);
        let q = calibrate_gaussian(1.0, 0.9, 0.05).unwrap();
        assert_relative_eq!(q.sigma2, 2.0 / 0.81 * 25f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(q.sigma2, 7.948, max_relative = 1e-3);
        let r = calibrate_gaussian(2.0, 0.9, 0.05).unwrap();
        assert_relative_eq!(r.sigma2, 4.0 * q.sigma2, max_relative = 1e-15);
    }

    #[test]
    fn calibration_rejects_out_of_range() {
        assert!(calibrate_gaussian(1.0, 1.0, 1e-5).is_err());
        assert!(calibrate_gaussian(1.0, 0.5, 1.0).is_err());
        assert!(calibrate_gaussian(0.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn advanced_composition_examples() {
        let z = advanced_composition(0.0, 0.01, 5).unwrap();
        assert_eq!(z.epsilon, 0.0);
        assert_relative_eq!(z.delta, 0.06, max_relative = 1e-15);
        let a = advanced_composition(0.01, 1e-6, 100).unwrap();
        assert_relative_eq!(a.epsilon, 0.545_652_176_975_693_2, max_relative = 1e-12);
        assert_relative_eq!(a.delta, 1.01e-4, max_relative = 1e-12);
        assert!(advanced_composition(1.0, 1e-6, 3).is_err());
    }

    #[test]
    fn amplification_examples() {
        assert_eq!(amplify_by_subsampling(0.0, 1e-6, 10, 100).unwrap().epsilon, 0.0);
        assert_relative_eq!(amplify_by_subsampling(0.7, 1e-6, 1, 1).unwrap().epsilon, 0.7, max_relative = 1e-14);
        let a = amplify_by_subsampling(0.5, 1e-6, 10, 1000).unwrap();
        assert_relative_eq!(a.epsilon, 0.006_437_333_795_730_878_5, max_relative = 1e-12);
    }

    #[test]
    fn inverses_round_trip() {
        let e0 = deamplify(0.01, 64, 4096).unwrap();
        let back = amplify_by_subsampling(e0, 1e-6, 64, 4096).unwrap().epsilon;
        assert!(back <= 0.01);
        assert_relative_eq!(back, 0.01, max_relative = 1e-10);
        let s = invert_advanced_composition(1.0, 1e-6, 500).unwrap();
        let c = advanced_composition(s.epsilon, s.delta, 500).unwrap();
        assert!(c.epsilon <= 1.0 && c.delta <= 1e-6);
        assert_relative_eq!(c.epsilon, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn ledger_basic_and_empty() {
        let mut l = PrivacyLedger::new();
        assert_eq!(l.total().unwrap(), PrivacySpend::new(0.0, 0.0));
        l.record_basic("a", 0.1, 1e-6).unwrap();
        l.record_basic("b", 0.2, 1e-6).unwrap();
        let t = l.total().unwrap();
        assert_relative_eq!(t.epsilon, 0.3, max_relative = 1e-15);
        assert_relative_eq!(t.delta, 2e-6, max_relative = 1e-15);
    }

    #[test]
    fn ledger_hard_limit() {
        let mut l = PrivacyLedger::with_limit(PrivacyBudget::new(0.25, 1e-3).unwrap());
        l.record_basic("a", 0.2, 1e-6).unwrap();
        assert!(matches!(l.record_basic("b", 0.1, 1e-6), Err(Error::BudgetExceeded { .. })));
        assert_eq!(l.entries().len(), 1);
    }

    #[test]
    fn ledger_json_round_trip() {
        let mut l = PrivacyLedger::new();
        l.record(LedgerEntry::new("x", 0.01, 1e-7, CompositionRule::Advanced, 3)).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.contains("\"total\""));
        let back: PrivacyLedger = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = stream_rng(7, StreamKind::OuterNoise, 0);
        let mut b = stream_rng(7, StreamKind::OuterNoise, 1);
        let mut c = stream_rng(7, StreamKind::OuterBatch, 0);
        let (x, y, z): (u64, u64, u64) = (a.random(), b.random(), c.random());
        assert!(x != y && x != z && y != z);
        let mut a2 = stream_rng(7, StreamKind::OuterNoise, 0);
        assert_eq!(x, a2.random::<u64>());
    }
}
