use dpbilevel::inner::{objective_gradient, HuberSum, QuadraticSum};
use dpbilevel::linalg::{dist, norm};
use dpbilevel::{derive_inner_params, dp_loc_gd, dp_loc_sgd, stream_rng, Dataset, InnerObjective, InnerOverrides, StreamKind};
use proptest::prelude::*;
use rand::Rng;

fn centred_cloud(n: usize, d: usize, seed: u64) -> Dataset<f64> {
    let mut rng = stream_rng(seed, StreamKind::Experiment, 0x51);
    let mut c = vec![0.0; d];
    c[0] = 2.0;
    let recs: Vec<Vec<f64>> = (0..n).map(|_| c.iter().map(|ci| ci + rng.random_range(-0.5..0.5)).collect()).collect();
    Dataset::from_records(&recs).unwrap()
}

/// Deterministic reference minimiser by plain gradient descent.
fn reference<O: InnerObjective<f64>>(obj: &O, y0: &[f64], step: f64) -> Vec<f64> {
    let mut y = y0.to_vec();
    for _ in 0..20_000 {
        let g = objective_gradient(obj, &y);
        if norm(&g) <= 1e-13 {
            break;
        }
        y.iter_mut().zip(&g).for_each(|(a, b)| *a -= step * b);
    }
    y
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn huber_error_close_to_quadratic_error() {
    let (n, d) = (4096, 5);
    let data = centred_cloud(n, d, 1);
    let quad = QuadraticSum { curvature: vec![1.0; d], data: &data };
    let huber = HuberSum { mu: 1.0, tau: 0.1, data: &data };
    let y0 = vec![0.0; d];
    let (q_star, h_star) = (reference(&quad, &y0, 0.5), reference(&huber, &y0, 0.5));
    let ov = InnerOverrides { t_cap: 2000, ..InnerOverrides::default() };
    // Both objectives are 1-strongly convex; per-sample gradients stay below 4
    // in the ball of radius 3 around the origin.
    let p = derive_inner_params(1.0, 4.0, n, d, 1.0, 1e-6, 64, 3.0, &ov).unwrap();
    let mut eq = Vec::new();
    let mut eh = Vec::new();
    for s in 0..10 {
        let rngs = || (stream_rng(s, StreamKind::InnerLowerNoise, 0), stream_rng(s, StreamKind::InnerLowerBatch, 0));
        let (mut a, mut b) = rngs();
        let yq = dp_loc_sgd(&quad, &y0, &p, &mut a, &mut b).unwrap().y;
        let (mut a, mut b) = rngs();
        let yh = dp_loc_sgd(&huber, &y0, &p, &mut a, &mut b).unwrap().y;
        eq.push(dist(&yq, &q_star));
        eh.push(dist(&yh, &h_star));
    }
    let (mq, mh) = (median(eq), median(eh));
    assert!(mh <= 3.0 * mq, "huber {mh:.3e} vs quadratic {mq:.3e}");
}

#[test]
fn noiseless_single_round_reaches_minimiser() {
    let data: Dataset<f64> = Dataset::from_records(&[vec![3.0]]).unwrap();
    let obj = QuadraticSum { curvature: vec![1.0], data: &data };
    let ov = InnerOverrides { c_sigma: 0.0, rounds: Some(1), iterations: Some(200_000), ..InnerOverrides::default() };
    let p = derive_inner_params(1.0, 5.0, 1, 1, 1.0, 1e-6, 1, 5.0, &ov).unwrap();
    let out = dp_loc_gd(&obj, &[0.0], &p, &mut stream_rng(0, StreamKind::InnerLowerNoise, 0)).unwrap();
    assert!((out.y[0] - 3.0).abs() <= 1e-4, "{}", out.y[0]);
}

#[test]
fn full_batch_and_sgd_agree_at_b_equal_n() {
    let data = centred_cloud(512, 3, 2);
    let obj = QuadraticSum { curvature: vec![1.0; 3], data: &data };
    let ov = InnerOverrides { t_cap: 200, ..InnerOverrides::default() };
    let p = derive_inner_params(1.0, 4.0, 512, 3, 1.0, 1e-6, 512, 3.0, &ov).unwrap();
    let a = dp_loc_gd(&obj, &[0.0; 3], &p, &mut stream_rng(9, StreamKind::InnerLowerNoise, 0)).unwrap();
    let b = dp_loc_sgd(
        &obj,
        &[0.0; 3],
        &p,
        &mut stream_rng(9, StreamKind::InnerLowerNoise, 0),
        &mut stream_rng(9, StreamKind::InnerLowerBatch, 0),
    )
    .unwrap();
    assert!(dist(&a.y, &b.y) <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterates_respect_round_balls(seed in any::<u64>(), eps in 0.2..2.0f64, batch in 8usize..128) {
        let data = centred_cloud(256, 3, seed);
        let obj = QuadraticSum { curvature: vec![1.0; 3], data: &data };
        let ov = InnerOverrides { t_cap: 300, ..InnerOverrides::default() };
        let p = derive_inner_params(1.0, 4.0, 256, 3, eps, 1e-6, batch, 3.0, &ov).unwrap();
        let out = dp_loc_sgd(&obj, &[0.0; 3], &p, &mut stream_rng(seed, StreamKind::InnerLowerNoise, 1), &mut stream_rng(seed, StreamKind::InnerLowerBatch, 1)).unwrap();
        prop_assert!(out.diagnostics.respects_balls(1e-12));
        let total = p.ledger.total().unwrap();
        prop_assert!(total.epsilon <= eps * (1.0 + 1e-9));
    }
}
