//! Empirical lower bounds on the regularity constants, checked against the
//! declared values.

use dpbilevel::linalg::{dist, dot, norm, sub};
use dpbilevel::{full_batch_gradient, stream_rng, BilevelProblem, Dataset, OracleKind, StreamKind};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sampling::{sample_in_set, uniform_in_ball};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantCheck {
    pub name: String,
    pub declared: f64,
    pub empirical: f64,
    /// `true` when the declared value must dominate the empirical one
    /// (Lipschitz constants), `false` when it must not exceed it (`mu_g`).
    pub upper: bool,
    pub ok: bool,
}

impl ConstantCheck {
    fn new(name: &str, declared: f64, empirical: f64, upper: bool) -> Self {
        let slack = 1e-9 * declared.abs().max(1e-12);
        let ok = if upper { empirical <= declared + slack } else { empirical >= declared - slack };
        ConstantCheck { name: name.to_string(), declared, empirical, upper, ok }
    }
}

fn joint_gradient<P: BilevelProblem<f64> + ?Sized>(problem: &P, upper: bool, x: &[f64], y: &[f64], r: &[f64]) -> Vec<f64> {
    let (kx, ky) = if upper { (OracleKind::GradXF, OracleKind::GradYF) } else { (OracleKind::GradXG, OracleKind::GradYG) };
    let mut gx = vec![0.0; problem.dim_x()];
    let mut gy = vec![0.0; problem.dim_y()];
    problem.per_sample_gradient(kx, x, y, r, &mut gx);
    problem.per_sample_gradient(ky, x, y, r, &mut gy);
    gx.extend(gy);
    gx
}

/// Probes `points` random pairs in `X × Y` against up to `max_records`
/// records and compares the observed ratios with the declared constants.
pub fn certify_constants<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    data: &Dataset<f64>,
    points: usize,
    max_records: usize,
    seed: u64,
) -> Result<Vec<ConstantCheck>> {
    let c = *problem.constants();
    let dom = problem.inner_domain();
    let region = problem.certified_x();
    let mut rng = stream_rng(seed, StreamKind::Experiment, 0xce7);
    let records: Vec<usize> = if data.len() <= max_records {
        (0..data.len()).collect()
    } else {
        (0..max_records).map(|_| rng.random_range(0..data.len())).collect()
    };
    let (mut l0f, mut l0g, mut l1f, mut l1g, mut l2g) = (0f64, 0f64, 0f64, 0f64, 0f64);
    let mut mu = f64::INFINITY;
    let mut have_hessians = true;
    for _ in 0..points {
        let x1 = sample_in_set(&mut rng, &region, 1.0);
        let x2 = sample_in_set(&mut rng, &region, 1.0);
        let y1 = uniform_in_ball(&mut rng, &dom.center, dom.radius);
        let y2 = uniform_in_ball(&mut rng, &dom.center, dom.radius);
        let dz = (dist(&x1, &x2).powi(2) + dist(&y1, &y2).powi(2)).sqrt();
        for &i in &records {
            let r = data.record(i);
            let f1 = joint_gradient(problem, true, &x1, &y1, r);
            let g1 = joint_gradient(problem, false, &x1, &y1, r);
            let f2 = joint_gradient(problem, true, &x2, &y2, r);
            let g2 = joint_gradient(problem, false, &x2, &y2, r);
            l0f = l0f.max(norm(&f1)).max(norm(&f2));
            let dx = problem.dim_x();
            l0g = l0g.max(norm(&g1[dx..])).max(norm(&g2[dx..]));
            if dz > 0.0 {
                l1f = l1f.max(dist(&f1, &f2) / dz);
                l1g = l1g.max(dist(&g1, &g2) / dz);
                match (
                    problem.hessian_yy_g(&x1, &y1, r),
                    problem.hessian_yy_g(&x2, &y2, r),
                    problem.hessian_xy_g(&x1, &y1, r),
                    problem.hessian_xy_g(&x2, &y2, r),
                ) {
                    (Some(a1), Some(a2), Some(b1), Some(b2)) => {
                        let dyy = sub(a1.as_slice(), a2.as_slice());
                        let dxy = sub(b1.as_slice(), b2.as_slice());
                        // a lower bound on the operator-norm change of the joint Hessian
                        let change = norm(&dyy).max(norm(&dxy)) / (problem.dim_y() as f64).sqrt();
                        l2g = l2g.max(change / dz);
                    }
                    _ => have_hessians = false,
                }
            }
        }
        let dy = dist(&y1, &y2);
        if dy > 0.0 {
            let a = full_batch_gradient(problem, OracleKind::GradYG, &x1, &y1, data)?;
            let b = full_batch_gradient(problem, OracleKind::GradYG, &x1, &y2, data)?;
            mu = mu.min(dot(&sub(&a, &b), &sub(&y1, &y2)) / (dy * dy));
        }
    }
    let mut out = vec![
        ConstantCheck::new("L0f", c.l0f, l0f, true),
        ConstantCheck::new("L1f", c.l1f, l1f, true),
        ConstantCheck::new("L0g", c.l0g, l0g, true),
        ConstantCheck::new("L1g", c.l1g, l1g, true),
    ];
    if have_hessians {
        out.push(ConstantCheck::new("L2g", c.l2g, l2g, true));
    }
    out.push(ConstantCheck::new("mu_g", c.mu_g, mu, false));
    Ok(out)
}
