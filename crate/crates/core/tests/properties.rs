use dpbilevel::inner::radius_schedule;
use dpbilevel::linalg::{dist, norm};
use dpbilevel::privacy::{deamplify, invert_advanced_composition};
use dpbilevel::{
    advanced_composition, amplify_by_subsampling, calibrate_gaussian, noisy_prox_descent, CompositionRule, ConvexSet, LedgerEntry,
    PrivacyLedger,
};
use proptest::prelude::*;

fn vec_in(d: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, d)
}

/// A set of one of the five kinds in dimension `d`.
fn set_of(d: usize) -> impl Strategy<Value = ConvexSet<f64>> {
    prop_oneof![
        Just(ConvexSet::WholeSpace { dim: d }),
        (vec_in(d, 2.0), 0.1..3.0f64).prop_map(|(center, radius)| ConvexSet::Ball { center, radius }),
        (vec_in(d, 2.0), prop::collection::vec(0.05..3.0f64, d)).prop_map(|(lo, w)| {
            let hi = lo.iter().zip(&w).map(|(l, w)| l + w).collect();
            ConvexSet::Box { lo, hi }
        }),
        Just(ConvexSet::NonnegOrthant { dim: d }),
        (0.1..3.0f64).prop_map(move |scale| ConvexSet::Simplex { dim: d, scale }),
    ]
}

fn set_and_points(k: usize) -> impl Strategy<Value = (ConvexSet<f64>, Vec<Vec<f64>>)> {
    (1..7usize).prop_flat_map(move |d| (set_of(d), prop::collection::vec(vec_in(d, 5.0), k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_lands_in_set_and_is_idempotent((set, pts) in set_and_points(1)) {
        let p = set.project(&pts[0]);
        prop_assert!(set.contains_tol(&p, 1e-12));
        prop_assert!(dist(&set.project(&p), &p) <= 1e-12);
    }

    #[test]
    fn projection_is_non_expansive((set, pts) in set_and_points(2)) {
        let (a, b) = (set.project(&pts[0]), set.project(&pts[1]));
        prop_assert!(dist(&a, &b) <= dist(&pts[0], &pts[1]) + 1e-12);
    }

    #[test]
    fn gradient_mapping_is_non_expansive((set, pts) in set_and_points(3), log_eta in -3.0..1.0f64) {
        let eta = 10f64.powf(log_eta);
        let x = set.project(&pts[0]);
        let gv = set.gradient_mapping(&x, &pts[1], eta).unwrap();
        let gw = set.gradient_mapping(&x, &pts[2], eta).unwrap();
        prop_assert!(dist(&gv, &gw) <= dist(&pts[1], &pts[2]) + 1e-12);
    }

    #[test]
    fn gradient_mapping_norm_at_most_gradient_norm((set, pts) in set_and_points(2), eta in 0.01..2.0f64) {
        let x = set.project(&pts[0]);
        let g = set.gradient_mapping(&x, &pts[1], eta).unwrap();
        prop_assert!(norm(&g) <= norm(&pts[1]) + 1e-12);
    }

    #[test]
    fn simplex_projection_sums_to_scale(z in vec_in(6, 4.0), scale in 0.1..5.0f64) {
        let s = ConvexSet::Simplex { dim: 6, scale };
        let p = s.project(&z);
        prop_assert!((p.iter().sum::<f64>() - scale).abs() <= 1e-12 * scale.max(1.0));
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn calibration_decreases_in_epsilon(s in 0.01..10.0f64, e in 0.01..0.9f64, d in 1e-9..0.5f64) {
        let a = calibrate_gaussian(s, e, d).unwrap().sigma2;
        let b = calibrate_gaussian(s, e * 1.05, d).unwrap().sigma2;
        prop_assert!(b < a);
    }

    #[test]
    fn advanced_composition_grows_with_t(e in 1e-4..0.5f64, d in 1e-9..1e-3f64, t in 1u64..5000) {
        let a = advanced_composition(e, d, t).unwrap();
        let b = advanced_composition(e, d, t + 1).unwrap();
        prop_assert!(b.epsilon > a.epsilon);
        prop_assert!(b.delta > a.delta);
    }

    #[test]
    fn amplification_bounded_and_monotone(e in 0.01..3.0f64, n in 2usize..10_000, frac in 0.0..1.0f64) {
        let b = ((frac * n as f64) as usize).clamp(1, n - 1);
        let lo = amplify_by_subsampling(e, 1e-6, b, n).unwrap().epsilon;
        let hi = amplify_by_subsampling(e, 1e-6, b + 1, n).unwrap().epsilon;
        prop_assert!(lo <= hi);
        prop_assert!(hi <= e * (1.0 + 1e-15));
    }

    #[test]
    fn deamplify_inverts_amplify(e in 0.001..0.9f64, n in 100usize..100_000, frac in 0.001..1.0f64) {
        let b = ((frac * n as f64) as usize).clamp(1, n);
        let e0 = deamplify(e, b, n).unwrap();
        let back = amplify_by_subsampling(e0, 1e-6, b, n).unwrap().epsilon;
        prop_assert!((back - e).abs() <= 1e-9 * e);
    }

    #[test]
    fn inverted_advanced_composition_fits(e in 0.01..5.0f64, d in 1e-9..1e-3f64, k in 1u64..10_000) {
        let step = invert_advanced_composition(e, d, k).unwrap();
        let total = advanced_composition(step.epsilon, step.delta, k).unwrap();
        prop_assert!(total.epsilon <= e * (1.0 + 1e-9));
        prop_assert!(total.delta <= d * (1.0 + 1e-12));
    }

    #[test]
    fn basic_ledger_sums_entries(e in 1e-4..0.1f64, d in 1e-10..1e-7f64, k in 1usize..50) {
        let mut l = PrivacyLedger::new();
        for i in 0..k {
            l.record(LedgerEntry::new("m", e, d, CompositionRule::Basic, i as u64)).unwrap();
        }
        let t = l.total().unwrap();
        prop_assert!((t.epsilon - k as f64 * e).abs() <= 1e-12 * k as f64 * e);
        prop_assert!((t.delta - k as f64 * d).abs() <= 1e-12 * k as f64 * d);
    }

    // Iterating the localization recurrence long enough settles below
    // 2 L √d / (μ ε' n) once d ≥ 4.
    #[test]
    fn radius_recurrence_settles(d in 4usize..50, n in 100usize..1_000_000, eps in 0.05..2.0f64, l in 0.5..10.0f64, r0 in 0.1..50.0f64) {
        let radii = radius_schedule(r0, 200, 1.0, l, n, d, eps, 1.0);
        let a = l / (eps * n as f64);
        prop_assert!(*radii.last().unwrap() <= 2.0 * a * (d as f64).sqrt() * (1.0 + 1e-9));
    }

    // Exact gradients and no noise: the displacement-argmin output meets
    // sqrt(12 L (h(x0) - inf h) / T) on a convex quadratic.
    #[test]
    fn noiseless_descent_meets_stationarity_rate(
        diag in prop::collection::vec(0.05..4.0f64, 1..6),
        x0 in vec_in(6, 3.0),
        t in 1usize..200,
    ) {
        let d = diag.len();
        let x0 = &x0[..d];
        let l = diag.iter().cloned().fold(0.0, f64::max);
        let eta = 1.0 / (2.0 * l);
        let set = ConvexSet::WholeSpace { dim: d };
        let h0: f64 = 0.5 * diag.iter().zip(x0).map(|(q, x)| q * x * x).sum::<f64>();
        let trace = noisy_prox_descent(
            |_, x: &[f64]| Ok(diag.iter().zip(x).map(|(q, v)| q * v).collect()),
            &set, x0, eta, 0.0, t, 0,
        ).unwrap();
        let g: Vec<f64> = diag.iter().zip(&trace.x_out).map(|(q, v)| q * v).collect();
        let gm = set.gradient_mapping(&trace.x_out, &g, eta).unwrap();
        prop_assert!(norm(&gm) <= (12.0 * l * h0 / t as f64).sqrt() + 1e-12);
    }

    #[test]
    fn descent_iterates_stay_feasible((set, pts) in set_and_points(2), sigma2 in 0.0..2.0f64, seed in any::<u64>()) {
        let x0 = set.project(&pts[0]);
        let shift = pts[1].clone();
        let trace = noisy_prox_descent(
            |_, x: &[f64]| Ok(x.iter().zip(&shift).map(|(a, b)| a - b).collect()),
            &set, &x0, 0.3, sigma2, 20, seed,
        ).unwrap();
        prop_assert!(trace.iterates.iter().all(|x| set.contains_tol(x, 1e-12)));
    }
}

#[test]
fn printed_examples_for_sets() {
    let s = ConvexSet::Simplex { dim: 2, scale: 1.0 };
    assert!(dist(&s.project(&[0.9, 0.9]), &[0.5, 0.5]) <= 1e-15);
    let b = ConvexSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
    assert_eq!(b.prox_step(&[1.0, 0.0], &[-2.0, 0.0], 1.0), vec![1.0, 0.0]);
    let o = ConvexSet::NonnegOrthant { dim: 1 };
    let g: Vec<f64> = o.gradient_mapping(&[0.1], &[1.0], 0.5).unwrap();
    assert!((g[0] - 0.2).abs() <= 1e-15);
}
