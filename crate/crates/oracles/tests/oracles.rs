use approx::assert_relative_eq;
use dpbilevel::linalg::{dist, norm};
use dpbilevel::problems::{MeanLeak, QuadraticBilevel, QuadraticGenerator, RegTuning, RegTuningSpec, RidgeGenerator};
use dpbilevel::{stream_rng, BilevelProblem, Dataset, StreamKind};
use dpbilevel_oracles::sampling::sample_in_set;
use dpbilevel_oracles::tuning::validation_curve;
use dpbilevel_oracles::{
    central_difference, exact_hypergradient, fit_loglog_slope, grid_search_omega, hypergradient_fd, penalty_gradient_exact, penalty_value,
    solve_inner_exact, InnerTarget,
};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn quadratic(seed: u64) -> (QuadraticBilevel<f64>, Dataset<f64>) {
    let gen = QuadraticGenerator { dim_x: 3, dim_y: 4, n: 80, coupling: 0.7, ..QuadraticGenerator::default() };
    QuadraticBilevel::generate(&gen, seed).unwrap()
}

fn point<P: BilevelProblem<f64>>(p: &P, seed: u64) -> Vec<f64> {
    sample_in_set(&mut stream_rng(seed, StreamKind::Experiment, 7), p.feasible_x(), 1.0)
}

#[test]
fn central_difference_of_smooth_function() {
    let g = central_difference(|x| Ok(x[0].sin() + x[0] * x[1] * x[1]), &[0.3, -1.2]).unwrap();
    assert_relative_eq!(g[0], 0.3f64.cos() + 1.44, max_relative = 1e-8);
    assert_relative_eq!(g[1], 2.0 * 0.3 * -1.2, max_relative = 1e-8);
}

#[test]
fn loglog_slope_of_power_law() {
    let xs: Vec<f64> = (0..8).map(|k| 10f64.powf(1.0 + k as f64 / 4.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-1.5)).collect();
    assert_relative_eq!(fit_loglog_slope(&xs, &ys), -1.5, max_relative = 1e-12);
}

#[test]
fn finite_difference_hypergradient_matches_closed_form() {
    let (p, data) = quadratic(3);
    let x = point(&p, 1);
    let exact = exact_hypergradient(&p, &data, &x, TOL).unwrap();
    let fd = hypergradient_fd(&p, &data, &x, TOL).unwrap();
    assert!(dist(&exact, &fd) <= 1e-6 * norm(&exact).max(1.0), "{exact:?} vs {fd:?}");

    let ld = Dataset::from_records(&[vec![1.0, 2.0], vec![-0.5, 0.0], vec![2.0, -1.0]]).unwrap();
    let leak = MeanLeak::new(&ld, ld.len() as f64).unwrap();
    let x = [0.2, -0.4];
    let exact = exact_hypergradient(&leak, &ld, &x, TOL).unwrap();
    let fd = hypergradient_fd(&leak, &ld, &x, TOL).unwrap();
    assert!(dist(&exact, &fd) <= 1e-6 * norm(&exact).max(1.0), "{exact:?} vs {fd:?}");
}

#[test]
fn penalty_gradient_is_gradient_of_penalty_value() {
    let (p, data) = quadratic(5);
    let x = point(&p, 2);
    let lambda = 50.0;
    let g = penalty_gradient_exact(&p, &data, &x, lambda, TOL).unwrap();
    let fd = central_difference(|z| Ok(penalty_value(&p, &data, z, lambda, TOL)?), &x).unwrap();
    assert!(dist(&g, &fd) <= 1e-5 * norm(&g).max(1.0), "{g:?} vs {fd:?}");
}

#[test]
fn doubling_lambda_halves_penalty_gap() {
    let (p, data) = quadratic(11);
    let x = point(&p, 4);
    let exact = exact_hypergradient(&p, &data, &x, TOL).unwrap();
    let gap = |l: f64| dist(&penalty_gradient_exact(&p, &data, &x, l, TOL).unwrap(), &exact);
    let (a, b, c) = (gap(200.0), gap(400.0), gap(800.0));
    assert!(a > 0.0);
    for r in [b / a, c / b] {
        assert!((0.4..=0.6).contains(&r), "ratios {} {}", b / a, c / b);
    }
}

#[test]
fn grid_search_refinement_is_no_worse_than_grid() {
    let gen = RidgeGenerator { n: 400, features: 3, ..RidgeGenerator::default() };
    let data = gen.generate(2).unwrap();
    let p = RegTuning::new(&data, RegTuningSpec { label_bound: gen.label_bound(), ..RegTuningSpec::default() }).unwrap();
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
    let gs = grid_search_omega(&p, &data, &grid, TOL).unwrap();
    let grid_min = gs.losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(gs.best_loss <= grid_min + 1e-12);
    assert_relative_eq!(gs.best_loss, validation_curve(&p, &data, gs.best, TOL).unwrap(), max_relative = 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalized_solution_within_constant_over_lambda(seed in 0u64..1000, xs in any::<u64>(), log_lambda in 0.5..4.0f64) {
        let (p, data) = quadratic(seed);
        let x = point(&p, xs);
        let lambda = 10f64.powf(log_lambda);
        let c = p.constants();
        let ys = solve_inner_exact(&p, &data, &x, InnerTarget::G, 0.0, TOL).unwrap();
        let yl = solve_inner_exact(&p, &data, &x, InnerTarget::FPlusLambdaG, lambda, TOL).unwrap();
        prop_assert!(dist(&yl, &ys) <= c.l0f / (lambda * c.mu_g) * (1.0 + 1e-9));
    }
}
