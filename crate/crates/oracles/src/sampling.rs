//! Random probe points.

use dpbilevel::linalg::norm;
use dpbilevel::ConvexSet;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

/// Uniform point in `B(center, radius)`.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / d as f64);
    for (vi, &c) in v.iter_mut().zip(center) {
        *vi = c + *vi * r / n;
    }
    v
}

/// A random point of `set`. Unbounded sets are probed at scale `scale`.
pub fn sample_in_set<R: Rng + ?Sized>(rng: &mut R, set: &ConvexSet<f64>, scale: f64) -> Vec<f64> {
    match set {
        ConvexSet::WholeSpace { dim } => (0..*dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        ConvexSet::Ball { center, radius } => uniform_in_ball(rng, center, *radius),
        ConvexSet::Box { lo, hi } => lo.iter().zip(hi).map(|(&l, &h)| l + (h - l) * rng.random::<f64>()).collect(),
        ConvexSet::NonnegOrthant { dim } => (0..*dim).map(|_| scale * rng.sample::<f64, _>(Exp1)).collect(),
        ConvexSet::Simplex { dim, scale: s } => {
            let e: Vec<f64> = (0..*dim).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let t: f64 = e.iter().sum();
            e.iter().map(|v| s * v / t).collect()
        }
    }
}

/// A random point of `R^dim` at scale `scale`, for probing set operations
/// from outside the set.
pub fn gaussian_point<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}
