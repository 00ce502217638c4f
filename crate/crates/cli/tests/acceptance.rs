//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! and prints one line per criterion, then exits non-zero if any failed.

use std::time::{Duration, Instant};

use dpbilevel::linalg::{dist, norm};
use dpbilevel::outer::split_budget;
use dpbilevel::privacy::add_gaussian_noise_in_place;
use dpbilevel::problems::{
    run_private_reg_tuning, MeanLeak, ProblemFamily, ProblemManifest, QuadraticBilevel, QuadraticGenerator, RegTuning, RegTuningSpec,
    RidgeGenerator, TuningConfig,
};
use dpbilevel::{
    advanced_composition, amplify_by_subsampling, calibrate_gaussian, stream_rng, BilevelProblem, BudgetSplit, CompositionRule, ConvexSet,
    Dataset, InnerOverrides, LedgerEntry, PrivacyBudget, PrivacyLedger, StreamKind,
};
use dpbilevel_cli::experiments::{self, run_proposition_check, run_scaling_sweep};
use dpbilevel_cli::{run_config, ExperimentConfig, ExperimentKind, ProblemRef, PropositionConfig, ScalingSweep};
use dpbilevel_oracles::sampling::{gaussian_point, sample_in_set};
use dpbilevel_oracles::{
    check_oracles, diagnostics_sweep, exact_hypergradient, fit_loglog_slope, grid_search_omega, penalty_lipschitz_ratio, swap_sensitivity,
};
use rand::Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn quadratic(gen: QuadraticGenerator, seed: u64) -> (QuadraticBilevel<f64>, Dataset<f64>) {
    QuadraticBilevel::generate(&gen, seed).expect("quadratic instance")
}

fn leak_reproduction() -> Outcome {
    let dir = tempfile::tempdir()?;
    let cfg = ExperimentConfig::from_json(
        r#"{
            "kind": "leak_demo",
            "problem": {"family": "mean_leak", "data": {"source": "inline", "records": [[1.0, 0.0], [3.0, 0.0]]}}
        }"#,
    )?;
    let cfg = ExperimentConfig { out_dir: Some(dir.path().to_path_buf()), ..cfg };
    let out = run_config(&cfg, dir.path())?;
    let g: Vec<f64> = serde_json::from_value(out.summary["hypergradient_at_origin"].clone())?;
    let err = g.iter().zip([2.0, 0.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err <= 1e-12, format!("hypergradient {g:?}, max abs error {err:.1e}")))
}

fn privacy_arithmetic() -> Outcome {
    let checks = [
        ("calibrate(1, 0.5, 1e-5)", calibrate_gaussian(1.0, 0.5, 1e-5)?.sigma2, 93.88855213027550540685),
        ("calibrate(1, 0.9, 0.05)", calibrate_gaussian(1.0, 0.9, 0.05)?.sigma2, 7.947841542884446294324),
        ("advanced(0.01, 1e-6, 100)", advanced_composition(0.01, 1e-6, 100)?.epsilon, 0.5456521769756932),
        ("amplify(0.5, 1e-6, 10, 1000)", amplify_by_subsampling(0.5, 1e-6, 10, 1000)?.epsilon, 0.0064373337957308785),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, got, want) in checks {
        let r = rel(got, want);
        ok &= r <= 1e-9;
        parts.push(format!("{name} rel {r:.0e}"));
    }
    let mut worst: f64 = 0.0;
    for t in [1usize, 7, 100, 5000] {
        let budget = PrivacyBudget::new(2.0, 1e-6)?;
        let (_, mech) = split_budget(&budget, t, BudgetSplit::Printed)?;
        let mut ledger = PrivacyLedger::new();
        for label in ["inner lower", "inner penalty", "outer gaussian"] {
            ledger.record(LedgerEntry::new(label, mech.epsilon, mech.delta, CompositionRule::Basic, 0))?;
        }
        let tot = ledger.total()?;
        let tf = t as f64;
        worst = worst.max(rel(tot.epsilon, 2.0 / (2.0 * tf).sqrt())).max(rel(tot.delta, 1e-6 / (tf + 1.0)));
    }
    ok &= worst <= 1e-12;
    parts.push(format!("per-round decomposition rel {worst:.0e}"));
    Ok((ok, parts.join(", ")))
}

fn gaussian_calibration() -> Outcome {
    let mech = calibrate_gaussian(0.25, 0.5, 1e-5)?;
    let mut v = vec![0.0f64; 1_000_000];
    add_gaussian_noise_in_place(&mut v, mech.sigma2, &mut stream_rng(3, StreamKind::Experiment, 0xc3));
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let r = rel(var, mech.sigma2);
    Ok((r <= 0.02, format!("empirical variance {var:.4} vs {:.4} (rel {r:.2e})", mech.sigma2)))
}

fn sets<R: Rng>(rng: &mut R) -> Vec<ConvexSet<f64>> {
    let d = rng.random_range(1..8usize);
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

fn non_expansiveness() -> Outcome {
    let mut rng = stream_rng(4, StreamKind::Experiment, 0xc4);
    let (mut count, mut violations) = (0, 0);
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
}

fn penalty_approximation() -> Outcome {
    let (p, d) = quadratic(QuadraticGenerator { dim_x: 5, dim_y: 5, n: 200, coupling: 0.8, ..QuadraticGenerator::default() }, 5);
    let lambdas: Vec<f64> = (0..=12).map(|k| 10f64.powf(1.0 + k as f64 / 4.0)).collect();
    let mut rng = stream_rng(5, StreamKind::Experiment, 0xc5);
    let mut slopes = Vec::new();
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..5 {
        let x = sample_in_set(&mut rng, &p.certified_x(), 1.0);
        let rows = diagnostics_sweep(&p, &d, &x, &lambdas, 1e-12)?;
        let gaps: Vec<f64> = rows.iter().map(|r| r.gradient_gap).collect();
        slopes.push(fit_loglog_slope(&lambdas, &gaps));
        for r in &rows {
            excess = excess.max(r.distance - r.bound);
        }
    }
    let ok = slopes.iter().all(|s| (s + 1.0).abs() <= 0.1) && excess <= 1e-10;
    Ok((ok, format!("slopes {slopes:.3?}, largest ‖yλ−y*‖ − L0f/(λμ) = {excess:.2e}")))
}

fn lambda_independent_sensitivity() -> Outcome {
    let c_l = dpbilevel::OuterOverrides::default().c_lipschitz;
    let (qp, qd) = quadratic(QuadraticGenerator { dim_x: 3, dim_y: 3, n: 50, coupling: 0.7, ..QuadraticGenerator::default() }, 6);
    let mut rng = stream_rng(6, StreamKind::Experiment, 0xc6);
    let recs: Vec<Vec<f64>> = (0..50).map(|_| gaussian_point(&mut rng, 2, 0.5)).collect();
    let ld = Dataset::from_records(&recs)?;
    let lp = MeanLeak::new(&ld, ld.len() as f64)?;
    let problems: [(&str, &dyn BilevelProblem<f64>, &Dataset<f64>); 2] = [("quadratic", &qp, &qd), ("mean_leak", &lp, &ld)];
    let lambdas = [10.0, 100.0, 1000.0];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, p, d) in problems {
        let c = p.constants();
        let bound = 2.0 * c_l * c.ell() * c.kappa() / d.len() as f64;
        // Replacements: reflected records, which maximise the spread for these families.
        let reps: Vec<Vec<f64>> = d.records().take(8).map(|r| r.iter().map(|v| -v).collect()).collect();
        let mut swaps = Vec::new();
        for _ in 0..3 {
            let x = sample_in_set(&mut rng, &p.certified_x(), 1.0);
            for &l in &lambdas {
                swaps.push((l, swap_sensitivity(p, d, &x, l, &reps, 1e-11)?));
            }
        }
        let worst = swaps.iter().map(|s| s.1).fold(0.0, f64::max);
        let per_lambda: Vec<f64> = lambdas.iter().map(|&l| swaps.iter().filter(|s| s.0 == l).map(|s| s.1).fold(0.0, f64::max)).collect();
        let (lo, hi) = per_lambda.iter().fold((f64::INFINITY, 0f64), |a, &v| (a.0.min(v), a.1.max(v)));
        let swap_flat = hi == 0.0 || hi < 2.0 * lo;
        let ratios = lambdas.iter().map(|&l| penalty_lipschitz_ratio(p, d, l, 10, 6, 1e-11)).collect::<Result<Vec<_>, _>>()?;
        let (rlo, rhi) = ratios.iter().fold((f64::INFINITY, 0f64), |a, &v| (a.0.min(v), a.1.max(v)));
        let ratio_flat = rhi == 0.0 || rhi < 2.0 * rlo;
        ok &= worst <= bound && swap_flat && ratio_flat;
        parts.push(format!(
            "{name}: swap by λ {:?} (bound {bound:.2e}), Lipschitz ratio by λ {ratios:.3?}",
            per_lambda.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn inner_scaling() -> Outcome {
    let res = run_scaling_sweep(&ScalingSweep::default(), 7)?;
    let balls = res.rows.iter().all(|r| r.respects_balls);
    let ok = (res.slope + 1.0).abs() <= 0.15 && balls;
    let meds: Vec<String> = res.rows.iter().map(|r| format!("{}:{:.3}", r.n, r.median_error)).collect();
    Ok((ok, format!("slope {:.3}, balls respected {balls}, medians [{}]", res.slope, meds.join(" "))))
}

fn outer_robustness() -> Outcome {
    let cfg = PropositionConfig::default();
    let res = run_proposition_check(&cfg, 8)?;
    let ok = res.runs == 20 && res.passes >= 19;
    Ok((ok, format!("{}/{} runs within alpha, T = {}", res.passes, res.runs, res.rows[0].iterations)))
}

/// Closed-form oracle minimiser of `F` over `X`, by projected gradient.
fn hyper_minimiser<P: BilevelProblem<f64> + ?Sized>(p: &P, d: &Dataset<f64>, eta: f64) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let set = p.feasible_x();
    let mut x = vec![0.0; p.dim_x()];
    for _ in 0..300 {
        let g = exact_hypergradient(p, d, &x, 1e-12)?;
        x = set.prox_step(&x, &g, eta);
    }
    Ok(x)
}

fn end_to_end() -> Outcome {
    let coupling = 0.5;
    let generator = QuadraticGenerator { dim_x: 10, dim_y: 10, n: 50_000, coupling, ..QuadraticGenerator::default() };
    let mut cfg = ExperimentConfig {
        kind: ExperimentKind::BilevelFull,
        problem: Some(ProblemRef::Inline(ProblemManifest { family: ProblemFamily::Quadratic { generator, seed: 1 }, constants: None })),
        ..ExperimentConfig::default()
    };
    let built = experiments::build_problem(&cfg, std::path::Path::new("."))?;
    let p = built.problem();
    let c = *p.constants();
    let lk3 = c.ell() * c.kappa().powi(3);

    // Target and start: α well below the start's stationarity gap, x0 on the
    // far side of X from the minimiser.
    let alpha = 0.5;
    let l_smooth = 1.0 + coupling * coupling;
    let eta = 1.0 / (2.0 * l_smooth);
    let x_star = hyper_minimiser(&p, &built.data, eta)?;
    let x0: Vec<f64> = x_star.iter().map(|v| -v / norm(&x_star)).collect();
    let g0 = p.feasible_x().gradient_mapping(&x0, &exact_hypergradient(&p, &built.data, &x0, 1e-12)?, eta)?;

    // Constants of the assignment fitted to this family: λ at the smallest value
    // the inexact-gradient analysis allows, the family's true smoothness, and
    // six outer rounds so each inner solve keeps a usable share of the budget.
    let o = &mut cfg.run.outer;
    o.c_lambda = 2.0 * c.l1g / c.mu_g * alpha / lk3;
    o.c_smooth = l_smooth / lk3;
    o.c_eta = 1e6;
    o.c_t = 6.0 * alpha * alpha / (c.delta_f * lk3) * (1.0 - 1e-9);
    o.clip = Some(3.0);
    cfg.run.inner.t_cap = 50;
    cfg.run.alpha = alpha;
    cfg.run.epsilon = 2.0;
    cfg.run.delta = 1e-6;
    cfg.x0 = Some(x0);

    let mut within = 0;
    let mut ledger_ok = true;
    let mut worst: f64 = 0.0;
    let mut deviation_logged = true;
    let mut iterations = 0;
    for seed in 0..20 {
        cfg.run.seed = seed;
        let out = experiments::run_bilevel(&built, &cfg, false)?;
        let params = &out.report.params.outer;
        iterations = params.iterations;
        if out.evaluation.gradient_mapping_norm <= params.alpha {
            within += 1;
        }
        worst = worst.max(out.evaluation.gradient_mapping_norm);
        let tot = out.report.ledger.total()?;
        ledger_ok &= tot.epsilon <= 2.0 && tot.delta <= 1e-6;
        deviation_logged &= out.report.warnings.iter().any(|w| w.contains("capped"));
    }
    let ok = within >= 18 && ledger_ok && deviation_logged && norm(&g0) >= 2.0 * alpha;
    Ok((
        ok,
        format!(
            "{within}/20 within alpha {alpha} (start gap {:.3}, worst {worst:.3}, T {iterations}), ledger within (2, 1e-6): {ledger_ok}, cap logged: {deviation_logged}",
            norm(&g0)
        ),
    ))
}

fn regularization_tuning() -> Outcome {
    let rgen = RidgeGenerator { n: 200_000, ..RidgeGenerator::default() };
    let data: Dataset<f64> = rgen.generate(0)?;
    let p = RegTuning::new(&data, RegTuningSpec { label_bound: rgen.label_bound(), ..RegTuningSpec::default() })?;
    let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.05).collect();
    let star = grid_search_omega(&p, &data, &grid, 1e-12)?.best;

    let mut cfg = TuningConfig {
        lambda: 5.0,
        eta: 0.15,
        iterations: 6,
        epsilon: 1000.0,
        inner: InnerOverrides { t_cap: 100, ..InnerOverrides::default() },
        ..TuningConfig::default()
    };
    cfg.outer.clip = Some(2.0);
    let clean = run_private_reg_tuning(&p, &data, &cfg.noiseless())?;
    let private = run_private_reg_tuning(&p, &data, &cfg)?;
    let clean_err = (clean.omega_out - star).abs();
    let mut devs: Vec<f64> = private.omegas.iter().zip(&clean.omegas).skip(1).map(|(a, b)| (a - b).abs() / b.abs()).collect();
    devs.sort_by(f64::total_cmp);
    let median_dev = devs[devs.len() / 2];
    let nonneg = clean.omegas.iter().chain(&private.omegas).all(|w| *w >= 0.0);
    let ok = clean_err <= 0.1 * star && median_dev <= 0.05 && nonneg;
    Ok((
        ok,
        format!(
            "ω* {star:.4}, zero-noise ω_out {:.4} (rel {:.3}), private median deviation {median_dev:.4}, ω ≥ 0: {nonneg}",
            clean.omega_out,
            clean_err / star
        ),
    ))
}

fn gradient_correctness() -> Outcome {
    let mut rng = stream_rng(11, StreamKind::Experiment, 0xcb);
    let recs: Vec<Vec<f64>> = (0..30).map(|_| gaussian_point(&mut rng, 3, 0.5)).collect();
    let ld = Dataset::from_records(&recs)?;
    let leak = MeanLeak::new(&ld, ld.len() as f64)?;
    let (qp, qd) = quadratic(QuadraticGenerator { dim_x: 4, dim_y: 3, n: 60, ..QuadraticGenerator::default() }, 11);
    let rgen = RidgeGenerator { n: 300, features: 3, ..RidgeGenerator::default() };
    let rd: Dataset<f64> = rgen.generate(11)?;
    let rp = RegTuning::new(&rd, RegTuningSpec { label_bound: rgen.label_bound(), ..RegTuningSpec::default() })?;
    let problems: [(&str, &dyn BilevelProblem<f64>, &Dataset<f64>); 3] =
        [("mean_leak", &leak, &ld), ("quadratic", &qp, &qd), ("reg_tuning", &rp, &rd)];
    let mut worst: f64 = 0.0;
    let mut oracles = 0;
    for (_, p, d) in problems {
        for c in check_oracles(p, d, 100, 11)? {
            worst = worst.max(c.max_error);
            oracles += 1;
        }
    }
    Ok((worst <= 1e-5, format!("{oracles} oracle checks, max relative error {worst:.2e}")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("leak reproduction", leak_reproduction, Duration::from_secs(1)),
        ("privacy arithmetic", privacy_arithmetic, Duration::from_secs(1)),
        ("gaussian calibration", gaussian_calibration, Duration::from_secs(10)),
        ("gradient mapping non-expansive", non_expansiveness, Duration::from_secs(30)),
        ("penalty approximation", penalty_approximation, Duration::from_secs(60)),
        ("lambda-independent sensitivity", lambda_independent_sensitivity, Duration::from_secs(60)),
        ("inner solver scaling", inner_scaling, Duration::from_secs(600)),
        ("outer loop robustness", outer_robustness, Duration::from_secs(120)),
        ("end-to-end private bilevel", end_to_end, Duration::from_secs(1800)),
        ("regularization tuning", regularization_tuning, Duration::from_secs(300)),
        ("gradient correctness", gradient_correctness, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match check() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let on_time = elapsed <= *budget;
        let status = if passed && on_time { "PASS" } else { "FAIL" };
        if status == "FAIL" {
            failed += 1;
        }
        let late = if on_time { String::new() } else { format!(", over the {}s budget", budget.as_secs()) };
        println!("criterion {:>2} {status} {name}: {detail} [{:.2}s{late}]", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
