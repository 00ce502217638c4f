//! The invariant battery behind `dpbilevel verify`.

use std::fmt;

use dpbilevel::inner::{derive_inner_params, objective_value, QuadraticSum};
use dpbilevel::linalg::{dist, dot, norm, sub};
use dpbilevel::outer::split_budget;
use dpbilevel::problems::{
    private_reg_tuning_step, run_private_reg_tuning, MeanLeak, QuadraticBilevel, QuadraticGenerator, RegTuning, RegTuningSpec, Regularizer,
    RidgeGenerator, TuningConfig, WithConstants,
};
use dpbilevel::{
    advanced_composition, amplify_by_subsampling, calibrate_gaussian, dp_loc_sgd, full_batch_gradient, minibatch_gradient,
    noisy_prox_descent, stream_rng, BilevelProblem, BudgetSplit, CompositionRule, ConvexSet, Dataset, InnerOverrides, LedgerEntry,
    OracleKind, PrivacyBudget, PrivacyLedger, ProblemConstants, StreamKind,
};
use dpbilevel_oracles::sampling::{gaussian_point, sample_in_set, uniform_in_ball};
use dpbilevel_oracles::{
    certify_constants, check_oracles, exact_hypergradient, hypergradient_fd, penalty_gradient_exact, penalty_lipschitz_ratio,
    solve_inner_exact, swap_sensitivity, InnerTarget,
};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind, ProblemRef};
use crate::error::Result;

/// Deliberate faults for checking that the battery catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Declare every built-in problem with half its `L0f`.
    HalveL0f,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub module: String,
    pub property: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &VerifyRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    /// Pass/fail pattern, for comparing runs under different seeds.
    pub fn pattern(&self) -> Vec<(String, bool)> {
        self.rows.iter().map(|r| (format!("{}/{}", r.module, r.property), r.passed)).collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w_mod = self.rows.iter().map(|r| r.module.len()).max().unwrap_or(6).max(6);
        let w_prop = self.rows.iter().map(|r| r.property.len()).max().unwrap_or(8).max(8);
        writeln!(f, "{:<w_mod$}  {:<w_prop$}  result  detail", "module", "property")?;
        writeln!(f, "{}", "-".repeat(w_mod + w_prop + 24))?;
        for r in &self.rows {
            let res = if r.passed { "pass" } else { "FAIL" };
            writeln!(f, "{:<w_mod$}  {:<w_prop$}  {res:<6}  {}", r.module, r.property, r.detail)?;
        }
        let failed = self.rows.iter().filter(|r| !r.passed).count();
        write!(f, "{} checks, {} failed", self.rows.len(), failed)
    }
}

struct Fixture {
    leak: (MeanLeak<f64>, Dataset<f64>),
    quad: (QuadraticBilevel<f64>, Dataset<f64>),
    reg: (RegTuning<f64>, Dataset<f64>),
    fault: Option<Fault>,
}

impl Fixture {
    fn new(seed: u64, fault: Option<Fault>) -> Result<Self> {
        let mut rng = stream_rng(seed, StreamKind::Experiment, 0x7e1);
        let recs: Vec<Vec<f64>> = (0..20).map(|_| gaussian_point(&mut rng, 2, 0.5)).collect();
        let ld = Dataset::from_records(&recs)?;
        let leak = (MeanLeak::new(&ld, ld.len() as f64)?, ld);
        let gen = QuadraticGenerator { dim_x: 3, dim_y: 3, n: 40, coupling: 0.7, ..QuadraticGenerator::default() };
        let quad = QuadraticBilevel::generate(&gen, seed)?;
        let rgen = RidgeGenerator { n: 200, ..RidgeGenerator::default() };
        let rd: Dataset<f64> = rgen.generate(seed)?;
        let spec = RegTuningSpec { label_bound: rgen.label_bound(), ..RegTuningSpec::default() };
        let reg = (RegTuning::new(&rd, spec)?, rd);
        Ok(Fixture { leak, quad, reg, fault })
    }

    fn declared(&self, p: &dyn BilevelProblem<f64>) -> ProblemConstants<f64> {
        let mut c = *p.constants();
        if self.fault == Some(Fault::HalveL0f) {
            c.l0f *= 0.5;
        }
        c
    }

    /// `(name, problem with declared constants, data)` for every built-in.
    fn each(&self) -> Vec<(&'static str, WithConstants<'_, f64>, &Dataset<f64>)> {
        vec![
            ("mean_leak", WithConstants::new(&self.leak.0, self.declared(&self.leak.0)), &self.leak.1),
            ("quadratic", WithConstants::new(&self.quad.0, self.declared(&self.quad.0)), &self.quad.1),
            ("reg_tuning", WithConstants::new(&self.reg.0, self.declared(&self.reg.0)), &self.reg.1),
        ]
    }
}

struct Rows(Vec<VerifyRow>);

impl Rows {
    fn push(&mut self, module: &str, property: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        self.0.push(VerifyRow { module: module.into(), property: property.into(), passed, detail });
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn sets<R: Rng>(rng: &mut R) -> Vec<ConvexSet<f64>> {
    let d = rng.random_range(1..6usize);
    let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..3.0)).collect();
    vec![
        ConvexSet::WholeSpace { dim: d },
        ConvexSet::Ball { center: gaussian_point(rng, d, 1.0), radius: rng.random_range(0.1..3.0) },
        ConvexSet::Box { lo, hi },
        ConvexSet::NonnegOrthant { dim: d },
        ConvexSet::Simplex { dim: d, scale: rng.random_range(0.1..3.0) },
    ]
}

/// Runs every check and returns the table. Never panics on a failed check.
pub fn verify_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let fx = Fixture::new(opts.seed, opts.fault)?;
    let seed = opts.seed;
    let mut rows = Rows(Vec::new());

    // core
    rows.push(
        "core",
        "oracles match central differences",
        (|| {
            let mut worst: f64 = 0.0;
            for (_, p, d) in fx.each() {
                for c in check_oracles(&p, d, 100, seed)? {
                    worst = worst.max(c.max_error);
                }
            }
            Ok((worst <= 1e-5, format!("max relative error {worst:.2e}")))
        })(),
    );
    rows.push(
        "core",
        "full batch reproducible and equal to per-sample mean",
        (|| {
            let (p, d) = (&fx.quad.0, &fx.quad.1);
            let x = vec![0.1, -0.2, 0.3];
            let y = vec![0.5, 0.0, -0.5];
            let mut ok = true;
            let mut worst: f64 = 0.0;
            for k in OracleKind::ALL {
                let a = full_batch_gradient(p, k, &x, &y, d)?;
                let b = full_batch_gradient(p, k, &x, &y, d)?;
                let idx: Vec<usize> = (0..d.len()).rev().collect();
                let c = minibatch_gradient(p, k, &x, &y, d, &idx)?;
                ok &= a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits());
                worst = worst.max(dist(&a, &c) / norm(&a).max(1.0));
            }
            Ok((ok && worst <= 1e-12, format!("bit-identical repeat: {ok}, permuted-order deviation {worst:.1e}")))
        })(),
    );
    rows.push(
        "core",
        "declared constants dominate empirical ratios",
        (|| {
            let mut bad = Vec::new();
            let mut pairs = 0;
            for (name, p, d) in fx.each() {
                let records = d.len().min(50);
                pairs += 200 * records;
                for c in certify_constants(&p, d, 200, 50, seed)? {
                    if !c.ok {
                        bad.push(format!("{name}: {} declared {:.4} vs empirical {:.4}", c.name, c.declared, c.empirical));
                    }
                }
            }
            let detail = if bad.is_empty() { format!("{pairs} pairs per problem set, no violation") } else { bad.join("; ") };
            Ok((bad.is_empty(), detail))
        })(),
    );

    // privacy
    rows.push(
        "privacy",
        "calibration satisfies the mechanism bound with equality",
        (|| {
            let mut worst: f64 = 0.0;
            for &s in &[0.01, 1.0, 7.5] {
                for &e in &[0.05, 0.5, 0.99] {
                    for &dl in &[1e-9, 1e-5, 0.05] {
                        let m = calibrate_gaussian(s, e, dl)?;
                        worst = worst.max(rel(2.0 * (1.25 / dl).ln() * s * s / (e * e), m.sigma2));
                    }
                }
            }
            Ok((worst <= 1e-12, format!("max relative gap {worst:.1e}")))
        })(),
    );
    rows.push(
        "privacy",
        "advanced composition monotone",
        (|| {
            let mut ok = true;
            for &e in &[0.001, 0.01, 0.1, 0.5] {
                for &dl in &[1e-8, 1e-6, 1e-4] {
                    let mut prev = 0.0;
                    for t in [1u64, 2, 10, 100, 1000] {
                        let v = advanced_composition(e, dl, t)?.epsilon;
                        ok &= v > prev;
                        prev = v;
                    }
                    ok &= advanced_composition(e * 1.1, dl, 50)?.epsilon > advanced_composition(e, dl, 50)?.epsilon;
                    ok &= advanced_composition(e, dl / 10.0, 50)?.epsilon > advanced_composition(e, dl, 50)?.epsilon;
                }
            }
            Ok((ok, "in T, epsilon0 and 1/delta0".into()))
        })(),
    );
    rows.push(
        "privacy",
        "amplification bounded by base and increasing in b",
        (|| {
            let mut ok = true;
            for &e in &[0.01, 0.5, 2.0] {
                for &n in &[10usize, 1000] {
                    let mut prev = 0.0;
                    for b in (1..=n).step_by((n / 10).max(1)).chain([n]) {
                        let a = amplify_by_subsampling(e, 1e-6, b, n)?.epsilon;
                        ok &= a <= e * (1.0 + 1e-15) && a >= prev;
                        prev = a;
                    }
                }
            }
            Ok((ok, "grid over epsilon0, b, n".into()))
        })(),
    );
    rows.push(
        "privacy",
        "ledger total equals independent recomputation",
        (|| {
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x1ed);
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let rounds = rng.random_range(1..40u64);
                let (e, dl) = (rng.random_range(1e-4..0.05), rng.random_range(1e-9..1e-7));
                let per_round = rng.random_range(1..4usize);
                let (be, bd) = (rng.random_range(0.0..0.1), rng.random_range(0.0..1e-7));
                let mut l = PrivacyLedger::new();
                l.record_basic("basic", be, bd)?;
                for r in 0..rounds {
                    for k in 0..per_round {
                        l.record(LedgerEntry::new(format!("m{k}"), e, dl, CompositionRule::Advanced, r))?;
                    }
                }
                let (re, rd) = (per_round as f64 * e, per_round as f64 * dl);
                let k = rounds as f64;
                let naive = (k * re, k * rd);
                let adv = (re * (2.0 * k * (1.0 / rd).ln()).sqrt() + 2.0 * k * re * re, (k + 1.0) * rd);
                let part = if re < 1.0 && adv.0 < naive.0 { adv } else { naive };
                let t = l.total()?;
                worst = worst.max(rel(t.epsilon, be + part.0)).max(rel(t.delta, bd + part.1));
            }
            Ok((worst <= 1e-12, format!("max relative gap {worst:.1e} over 50 ledgers")))
        })(),
    );
    rows.push(
        "privacy",
        "noise streams are distinct",
        (|| {
            let kinds = [
                StreamKind::OuterNoise,
                StreamKind::OuterBatch,
                StreamKind::InnerLowerNoise,
                StreamKind::InnerLowerBatch,
                StreamKind::InnerPenaltyNoise,
                StreamKind::InnerPenaltyBatch,
                StreamKind::Generator,
                StreamKind::Experiment,
            ];
            let mut firsts = Vec::new();
            for k in kinds {
                for i in 0..64 {
                    firsts.push(stream_rng(seed, k, i).next_u64());
                }
            }
            let total = firsts.len();
            firsts.sort_unstable();
            firsts.dedup();
            Ok((firsts.len() == total, format!("{total} streams, {} distinct first draws", firsts.len())))
        })(),
    );

    // geometry
    rows.push(
        "geometry",
        "gradient mapping non-expansive",
        (|| {
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x9e0);
            let mut violations = 0;
            let mut count = 0;
            while count < 10_000 {
                for set in sets(&mut rng) {
                    let d = set.dim();
                    let x = sample_in_set(&mut rng, &set, 2.0);
                    let v = gaussian_point(&mut rng, d, 3.0);
                    let w = gaussian_point(&mut rng, d, 3.0);
                    let eta = 10f64.powf(rng.random_range(-3.0..1.0));
                    let gv = set.gradient_mapping(&x, &v, eta)?;
                    let gw = set.gradient_mapping(&x, &w, eta)?;
                    if dist(&gv, &gw) > dist(&v, &w) + 1e-12 {
                        violations += 1;
                    }
                    count += 1;
                }
            }
            Ok((violations == 0, format!("{violations} violations in {count} tuples")))
        })(),
    );
    rows.push(
        "geometry",
        "projection idempotent and 1-Lipschitz",
        (|| {
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x9e1);
            let mut bad = 0;
            for _ in 0..400 {
                for set in sets(&mut rng) {
                    let d = set.dim();
                    let a = gaussian_point(&mut rng, d, 3.0);
                    let b = gaussian_point(&mut rng, d, 3.0);
                    let pa = set.project(&a);
                    let pb = set.project(&b);
                    if dist(&set.project(&pa), &pa) > 1e-12 || dist(&pa, &pb) > dist(&a, &b) + 1e-12 {
                        bad += 1;
                    }
                }
            }
            Ok((bad == 0, format!("{bad} violations in 2000 pairs")))
        })(),
    );
    rows.push(
        "geometry",
        "prox step first-order optimality",
        (|| {
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x9e2);
            let mut worst = f64::INFINITY;
            for _ in 0..400 {
                for set in sets(&mut rng) {
                    let d = set.dim();
                    let x = sample_in_set(&mut rng, &set, 2.0);
                    let v = gaussian_point(&mut rng, d, 3.0);
                    let eta = rng.random_range(0.01..2.0);
                    let us = set.prox_step(&x, &v, eta);
                    let u = sample_in_set(&mut rng, &set, 2.0);
                    let g: Vec<f64> = v.iter().zip(us.iter().zip(&x)).map(|(vi, (ui, xi))| vi + (ui - xi) / eta).collect();
                    worst = worst.min(dot(&g, &sub(&u, &us)));
                }
            }
            Ok((worst >= -1e-10, format!("smallest inner product {worst:.2e}")))
        })(),
    );

    // inner
    let sum_data = {
        let mut rng = stream_rng(seed, StreamKind::Experiment, 0x1a0);
        let recs: Vec<Vec<f64>> = (0..256).map(|_| uniform_in_ball(&mut rng, &[1.0, -1.0, 0.5], 0.5)).collect();
        Dataset::from_records(&recs)?
    };
    rows.push(
        "inner",
        "iterates stay in their round balls",
        (|| {
            let obj = QuadraticSum { curvature: vec![1.0; 3], data: &sum_data };
            let ov = InnerOverrides { t_cap: 2000, ..InnerOverrides::default() };
            let p = derive_inner_params(1.0, 3.0, sum_data.len(), 3, 0.5, 1e-6, 16, 3.0, &ov)?;
            let mut worst = f64::NEG_INFINITY;
            for s in 0..5 {
                let mut a = stream_rng(seed, StreamKind::InnerLowerNoise, s);
                let mut b = stream_rng(seed, StreamKind::InnerLowerBatch, s);
                let out = dp_loc_sgd(&obj, &[0.0; 3], &p, &mut a, &mut b)?;
                for (e, r) in out.diagnostics.max_excursion.iter().zip(&out.diagnostics.radii) {
                    worst = worst.max(e - r);
                }
            }
            Ok((worst <= 1e-12, format!("largest excursion beyond radius {worst:.2e}")))
        })(),
    );
    rows.push(
        "inner",
        "ledger of one solve composes to its budget",
        (|| {
            let ov = InnerOverrides { t_cap: 2000, ..InnerOverrides::default() };
            let mut worst: f64 = 0.0;
            let mut fits = true;
            for &(eps, b) in &[(0.5, 16usize), (0.1, 256), (0.9, 64)] {
                let p = derive_inner_params(1.0, 3.0, sum_data.len(), 3, eps, 1e-6, b, 3.0, &ov)?;
                let t = p.ledger.total()?;
                fits &= t.fits(&PrivacyBudget::new(eps, 1e-6)?);
                if p.warnings.is_empty() {
                    worst = worst.max(rel(t.epsilon, eps));
                }
            }
            Ok((fits && worst <= 1e-6, format!("within budget: {fits}, largest shortfall {worst:.1e}")))
        })(),
    );
    rows.push(
        "inner",
        "noiseless averaged SGD meets the classical rate",
        (|| {
            let obj = QuadraticSum { curvature: vec![1.0; 3], data: &sum_data };
            let ov = InnerOverrides { c_sigma: 0.0, rounds: Some(1), iterations: Some(500), ..InnerOverrides::default() };
            let p = derive_inner_params(1.0, 3.0, sum_data.len(), 3, 0.5, 1e-6, sum_data.len(), 3.0, &ov)?;
            let mut a = stream_rng(seed, StreamKind::InnerLowerNoise, 0);
            let mut b = stream_rng(seed, StreamKind::InnerLowerBatch, 0);
            let out = dp_loc_sgd(&obj, &[0.0; 3], &p, &mut a, &mut b)?;
            let star = sum_data.field_mean(0, 3);
            let gap = objective_value(&obj, &out.y).unwrap_or(f64::NAN) - objective_value(&obj, &star).unwrap_or(f64::NAN);
            let t: f64 = 500.0;
            let bound = 9.0 * (1.0 + t.ln()) / t;
            Ok((gap <= bound, format!("suboptimality {gap:.2e} vs L^2 (1+ln T)/(mu T) = {bound:.2e}")))
        })(),
    );

    // outer
    rows.push(
        "outer",
        "iterates stay in X",
        (|| {
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x0e0);
            let mut ok = true;
            for _ in 0..20 {
                for set in sets(&mut rng) {
                    let x0 = sample_in_set(&mut rng, &set, 1.0);
                    let shift = gaussian_point(&mut rng, set.dim(), 2.0);
                    let tr = noisy_prox_descent(|_, x| Ok(sub(x, &shift)), &set, &x0, 0.3, 0.5, 30, seed)?;
                    ok &= tr.iterates.iter().all(|x| set.contains_tol(x, 1e-12));
                }
            }
            Ok((ok, "100 runs across all set kinds".into()))
        })(),
    );
    rows.push(
        "outer",
        "printed split composes to the per-round spend",
        (|| {
            let mut worst: f64 = 0.0;
            for &t in &[1usize, 10, 1000] {
                let b = PrivacyBudget::new(2.0, 1e-6)?;
                let (round, mech) = split_budget(&b, t, BudgetSplit::Printed)?;
                let mut l = PrivacyLedger::new();
                for label in ["inner lower", "inner penalty", "outer gaussian"] {
                    l.record(LedgerEntry::new(label, mech.epsilon, mech.delta, CompositionRule::Basic, 0))?;
                }
                let tot = l.total()?;
                let tf = t as f64;
                worst = worst
                    .max(rel(tot.epsilon, 2.0 / (2.0 * tf).sqrt()))
                    .max(rel(tot.delta, 1e-6 / (tf + 1.0)))
                    .max(rel(round.epsilon, tot.epsilon));
            }
            Ok((worst <= 1e-12, format!("max relative gap {worst:.1e}")))
        })(),
    );
    rows.push(
        "outer",
        "swap sensitivity within 2 C_L l kappa / n",
        (|| {
            let c_l = dpbilevel::OuterOverrides::default().c_lipschitz;
            let mut detail = Vec::new();
            let mut ok = true;
            for (name, p, d) in fx.each().into_iter().take(2) {
                let c = p.constants();
                let bound = 2.0 * c_l * c.ell() * c.kappa() / d.len() as f64;
                let reps: Vec<Vec<f64>> = d.records().take(5).map(|r| r.iter().map(|v| -v).collect()).collect();
                let x = sample_in_set(&mut stream_rng(seed, StreamKind::Experiment, 0x0e1), p.feasible_x(), 1.0);
                let mut worst: f64 = 0.0;
                for lambda in [10.0, 1000.0] {
                    worst = worst.max(swap_sensitivity(&p, d, &x, lambda, &reps, 1e-11)?);
                }
                ok &= worst <= bound;
                detail.push(format!("{name} {:.2e}/{:.2e}", worst, bound));
            }
            Ok((ok, detail.join(", ")))
        })(),
    );
    rows.push(
        "outer",
        "surrogate gradient gap shrinks like l kappa^3 / lambda",
        (|| {
            let (p, d) = (&fx.quad.0, &fx.quad.1);
            let c = p.constants();
            let lk3 = c.ell() * c.kappa().powi(3);
            let x = vec![0.2, -0.1, 0.4];
            let hyper = exact_hypergradient(p, d, &x, 1e-12)?;
            let mut worst: f64 = 0.0;
            for lambda in [10.0, 100.0, 1000.0] {
                let pen = penalty_gradient_exact(p, d, &x, lambda, 1e-12)?;
                worst = worst.max(dist(&pen, &hyper) * lambda / lk3);
            }
            Ok((worst <= 1.0, format!("largest lambda * gap / (l kappa^3) = {worst:.3}")))
        })(),
    );

    // oracles
    rows.push(
        "oracles",
        "exact hypergradient matches finite differences",
        (|| {
            let mut worst: f64 = 0.0;
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x0c0);
            for (_, p, d) in fx.each() {
                for _ in 0..5 {
                    let x = sample_in_set(&mut rng, p.feasible_x(), 0.8);
                    let a = exact_hypergradient(&p, d, &x, 1e-12)?;
                    let b = hypergradient_fd(&p, d, &x, 1e-12)?;
                    worst = worst.max(dist(&a, &b) / norm(&b).max(1.0));
                }
            }
            Ok((worst <= 1e-5, format!("max relative error {worst:.2e}")))
        })(),
    );
    rows.push(
        "oracles",
        "penalized solution within L0f/(lambda mu_g)",
        (|| {
            let mut worst = f64::NEG_INFINITY;
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x0c1);
            for (_, p, d) in fx.each() {
                let c = *p.constants();
                for _ in 0..5 {
                    let x = sample_in_set(&mut rng, p.feasible_x(), 0.8);
                    let ys = solve_inner_exact(&p, d, &x, InnerTarget::G, 0.0, 1e-12)?;
                    for lambda in [1.0, 10.0, 100.0, 1000.0] {
                        let yl = solve_inner_exact(&p, d, &x, InnerTarget::FPlusLambdaG, lambda, 1e-12)?;
                        worst = worst.max(dist(&yl, &ys) - c.l0f / (lambda * c.mu_g));
                    }
                }
            }
            Ok((worst <= 1e-10, format!("largest excess {worst:.2e}")))
        })(),
    );
    rows.push(
        "oracles",
        "per-sample surrogate Lipschitz ratio independent of lambda",
        (|| {
            let (p, d) = (&fx.quad.0, &fx.quad.1);
            let ratios = [10.0, 100.0, 1000.0].map(|l| penalty_lipschitz_ratio(p, d, l, 10, seed, 1e-11));
            let ratios = ratios.into_iter().collect::<std::result::Result<Vec<f64>, _>>()?;
            let c = p.constants();
            let cap = dpbilevel::OuterOverrides::default().c_lipschitz * c.ell() * c.kappa();
            let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0f64), |a, &r| (a.0.min(r), a.1.max(r)));
            Ok((hi <= cap && hi <= 2.0 * lo, format!("ratios {ratios:.3?}, cap {cap:.3}")))
        })(),
    );

    // problems
    rows.push(
        "problems",
        "mean leak hypergradient at origin is the mean",
        (|| {
            let (p, d) = (&fx.leak.0, &fx.leak.1);
            let g = exact_hypergradient(p, d, &[0.0, 0.0], 1e-14)?;
            let m = d.field_mean(0, 2);
            let err = dist(&g, &m);
            Ok((err <= 1e-12, format!("distance {err:.1e}")))
        })(),
    );
    rows.push(
        "problems",
        "quadratic closed form matches inner solve",
        (|| {
            let (p, d) = (&fx.quad.0, &fx.quad.1);
            let mut worst: f64 = 0.0;
            let mut rng = stream_rng(seed, StreamKind::Experiment, 0x0b0);
            for _ in 0..5 {
                let x = sample_in_set(&mut rng, p.feasible_x(), 1.0);
                for lambda in [1.0, 100.0] {
                    let a = p.y_lambda(&x, lambda, d);
                    let b = solve_inner_exact(p, d, &x, InnerTarget::FPlusLambdaG, lambda, 1e-12)?;
                    worst = worst.max(dist(&a, &b));
                }
                worst = worst.max(dist(&p.y_star(&x, d), &solve_inner_exact(p, d, &x, InnerTarget::G, 0.0, 1e-12)?));
            }
            Ok((worst <= 1e-8, format!("max distance {worst:.1e}")))
        })(),
    );
    rows.push(
        "problems",
        "tuning weight stays non-negative and follows the prox step",
        (|| {
            let rgen = RidgeGenerator { n: 4000, ..RidgeGenerator::default() };
            let d: Dataset<f64> = rgen.generate(seed)?;
            let p = RegTuning::new(&d, RegTuningSpec { label_bound: rgen.label_bound(), ..RegTuningSpec::default() })?;
            let (p, d) = (&p, &d);
            let cfg = TuningConfig {
                seed,
                iterations: 5,
                epsilon: 200.0,
                inner: InnerOverrides { t_cap: 50, ..InnerOverrides::default() },
                ..TuningConfig::default()
            };
            let rep = run_private_reg_tuning(p, d, &cfg)?;
            let nonneg = rep.omegas.iter().all(|w| *w >= 0.0);
            let (th, thl) = ([0.8, -0.1], [0.5, 0.2]);
            let (eta, lambda, sigma2) = (0.3, 4.0, 0.5);
            let est = lambda * (Regularizer::SquaredNorm.value(&thl) - Regularizer::SquaredNorm.value(&th));
            let tr = noisy_prox_descent(|_, _| Ok(vec![est]), &ConvexSet::<f64>::NonnegOrthant { dim: 1 }, &[0.7], eta, sigma2, 20, seed)?;
            let mut w: f64 = 0.7;
            let mut same = true;
            for t in 0..20 {
                let mut rng = stream_rng(seed, StreamKind::OuterNoise, t);
                w = private_reg_tuning_step(w, &th, &thl, eta, lambda, sigma2, Regularizer::SquaredNorm, None, &mut rng);
                same &= w.to_bits() == tr.iterates[t as usize + 1][0].to_bits();
            }
            Ok((nonneg && same, format!("omega >= 0: {nonneg}, matches prox descent: {same}")))
        })(),
    );

    // cli
    rows.push(
        "cli",
        "same config and seed give identical reports",
        (|| {
            let cfg = ExperimentConfig {
                kind: ExperimentKind::BilevelFull,
                problem: Some(ProblemRef::Inline(dpbilevel::problems::ProblemManifest {
                    family: dpbilevel::problems::ProblemFamily::Quadratic { generator: QuadraticGenerator::default(), seed },
                    constants: None,
                })),
                run: dpbilevel::RunConfig {
                    seed,
                    alpha: 1.0,
                    outer: dpbilevel::OuterOverrides { t_cap: Some(3), ..Default::default() },
                    inner: InnerOverrides { t_cap: 20, ..Default::default() },
                    ..Default::default()
                },
                ..ExperimentConfig::default()
            };
            let dir = tempfile::tempdir().map_err(|e| crate::CliError::Write { path: "tempdir".into(), source: e })?;
            let mut texts = Vec::new();
            for k in 0..2 {
                let mut c = cfg.clone();
                c.out_dir = Some(dir.path().join(format!("r{k}")));
                let o = crate::run_config(&c, dir.path())?;
                let path = o.out_dir.join("run_report.json");
                let mut v: serde_json::Value = serde_json::from_slice(
                    &std::fs::read(&path).map_err(|e| crate::CliError::Write { path: path.display().to_string(), source: e })?,
                )?;
                let embeds = v["params"]["outer"]["overrides"].is_object()
                    && v["params"]["inner_lower"]["overrides"].is_object()
                    && v["params"]["config"].is_object();
                if !embeds {
                    return Ok((false, "report lacks the resolved parameters".into()));
                }
                v["timing"] = serde_json::Value::Null;
                texts.push(serde_json::to_string(&v)?);
            }
            Ok((texts[0] == texts[1], "two runs, timing field excluded".into()))
        })(),
    );

    Ok(VerifyReport { seed, rows: rows.0 })
}
