//! Quadratic bilevel family with closed-form lower solutions.
//!
//! `f(x, y; ξ) = ½‖x − a_ξ‖² + ½‖y − b_ξ‖²`, `g(x, y; ξ) = ½‖y − Ax − c_ξ‖²`,
//! with records laid out as `[a (d_x), b (d_y), c (d_y)]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::ConvexSet;
use crate::linalg::{norm, Matrix};
use crate::privacy::{stream_rng, StreamKind};
use crate::problem::{BilevelProblem, InnerDomain, OracleKind, ProblemConstants};
use crate::scalar::Real;

/// Declared data bounds: `‖a_ξ‖ ≤ a_radius` and so on, and `X = B(0, x_radius)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticBounds {
    pub x_radius: f64,
    pub a_radius: f64,
    pub b_radius: f64,
    pub c_radius: f64,
    /// Drop the ball constraint on `x`. Declared constants then only hold on
    /// the ball.
    pub unconstrained: bool,
}

impl Default for QuadraticBounds {
    fn default() -> Self {
        QuadraticBounds { x_radius: 1.0, a_radius: 1.0, b_radius: 1.0, c_radius: 1.0, unconstrained: false }
    }
}

/// Synthetic data generator. Each field of a record is `center + spread · u`
/// with `u` uniform in the unit ball; the centers are drawn once per seed with
/// norm `center_fraction` times the field radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticGenerator {
    pub dim_x: usize,
    pub dim_y: usize,
    pub n: usize,
    /// Spectral norm of the random coupling matrix.
    pub coupling: f64,
    pub center_fraction: f64,
    pub bounds: QuadraticBounds,
}

impl Default for QuadraticGenerator {
    fn default() -> Self {
        QuadraticGenerator { dim_x: 2, dim_y: 2, n: 100, coupling: 0.5, center_fraction: 0.5, bounds: QuadraticBounds::default() }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticBilevel<S: Real> {
    a: Matrix<S>,
    dim_x: usize,
    dim_y: usize,
    bounds: QuadraticBounds,
    coupling_norm: S,
    constants: ProblemConstants<S>,
    feasible: ConvexSet<S>,
    domain: InnerDomain<S>,
}

impl<S: Real> QuadraticBilevel<S> {
    /// `a` is the `d_y × d_x` coupling matrix.
    pub fn new(a: Matrix<S>, bounds: QuadraticBounds) -> Result<Self> {
        let (dim_y, dim_x) = (a.rows(), a.cols());
        if dim_x == 0 || dim_y == 0 {
            return Err(Error::param("A", "coupling matrix must be non-empty"));
        }
        if !crate::linalg::all_finite(a.as_slice()) {
            return Err(Error::NonFinite("coupling matrix".into()));
        }
        for (name, v) in
            [("x_radius", bounds.x_radius), ("a_radius", bounds.a_radius), ("b_radius", bounds.b_radius), ("c_radius", bounds.c_radius)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive and finite"));
            }
        }
        let s_a = a.spectral_norm().as_f64();
        let QuadraticBounds { x_radius: rx, a_radius: ra, b_radius: rb, c_radius: rc, .. } = bounds;
        let r_y = s_a * rx + rc.max(rb);
        let l1g = 1.0 + s_a * s_a;
        let constants = ProblemConstants::new(
            S::lit(((rx + ra).powi(2) + (r_y + rb).powi(2)).sqrt()),
            S::one(),
            S::lit(r_y + s_a * rx + rc),
            S::lit(l1g),
            S::lit(l1g),
            S::one(),
            S::lit(0.5 * (rx + ra).powi(2) + 0.5 * (s_a * rx + rc + rb).powi(2)),
        )?;
        let feasible =
            if bounds.unconstrained { ConvexSet::WholeSpace { dim: dim_x } } else { ConvexSet::ball(vec![S::zero(); dim_x], S::lit(rx))? };
        Ok(QuadraticBilevel {
            a,
            dim_x,
            dim_y,
            bounds,
            coupling_norm: S::lit(s_a),
            constants,
            feasible,
            domain: InnerDomain { center: vec![S::zero(); dim_y], radius: S::lit(r_y) },
        })
    }

    /// Random instance and dataset for `seed`.
    pub fn generate(generator: &QuadraticGenerator, seed: u64) -> Result<(Self, Dataset<S>)> {
        let g = generator;
        if g.n == 0 {
            return Err(Error::EmptyBatch);
        }
        if !(0.0..=1.0).contains(&g.center_fraction) {
            return Err(Error::param("center_fraction", "must lie in [0, 1]"));
        }
        let mut rng = stream_rng(seed, StreamKind::Generator, 0);
        let mut raw = Matrix::<f64>::zeros(g.dim_y, g.dim_x);
        for i in 0..g.dim_y {
            for j in 0..g.dim_x {
                raw.set(i, j, rng.sample(StandardNormal));
            }
        }
        let sn = raw.spectral_norm();
        let a = if sn > 0.0 { raw.scaled(g.coupling / sn) } else { raw };
        let a = Matrix::from_row_major(g.dim_y, g.dim_x, a.as_slice().iter().map(|&v| S::lit(v)).collect())?;

        let b = g.bounds;
        let f = g.center_fraction;
        let centers = [
            random_direction(&mut rng, g.dim_x, f * b.a_radius),
            random_direction(&mut rng, g.dim_y, f * b.b_radius),
            random_direction(&mut rng, g.dim_y, f * b.c_radius),
        ];
        let spreads = [(1.0 - f) * b.a_radius, (1.0 - f) * b.b_radius, (1.0 - f) * b.c_radius];
        let record_len = g.dim_x + 2 * g.dim_y;
        let mut values = Vec::with_capacity(g.n * record_len);
        for _ in 0..g.n {
            for (c, &s) in centers.iter().zip(&spreads) {
                let u = uniform_in_ball(&mut rng, c.len(), s);
                values.extend(c.iter().zip(&u).map(|(&ci, &ui)| S::lit(ci + ui)));
            }
        }
        let data = Dataset::from_flat(record_len, values)?;
        Ok((Self::new(a, b)?, data))
    }

    pub fn coupling(&self) -> &Matrix<S> {
        &self.a
    }

    pub fn coupling_norm(&self) -> S {
        self.coupling_norm
    }

    pub fn bounds(&self) -> QuadraticBounds {
        self.bounds
    }

    fn means(&self, data: &Dataset<S>) -> (Vec<S>, Vec<S>, Vec<S>) {
        (data.field_mean(0, self.dim_x), data.field_mean(self.dim_x, self.dim_y), data.field_mean(self.dim_x + self.dim_y, self.dim_y))
    }

    /// `y*(x) = Ax + mean(c)`.
    pub fn y_star(&self, x: &[S], data: &Dataset<S>) -> Vec<S> {
        let (_, _, c) = self.means(data);
        let mut y = self.a.matvec(x);
        y.iter_mut().zip(&c).for_each(|(v, &ci)| *v = *v + ci);
        y
    }

    /// `y^λ(x) = (mean(b) + λ(Ax + mean(c))) / (1 + λ)`.
    pub fn y_lambda(&self, x: &[S], lambda: S, data: &Dataset<S>) -> Vec<S> {
        let (_, b, _) = self.means(data);
        let ys = self.y_star(x, data);
        ys.iter().zip(&b).map(|(&s, &bi)| (bi + lambda * s) / (S::one() + lambda)).collect()
    }

    /// `∇F(x) = x − mean(a) + Aᵀ(Ax + mean(c) − mean(b))`.
    pub fn hypergradient(&self, x: &[S], data: &Dataset<S>) -> Vec<S> {
        let (a, b, _) = self.means(data);
        let ys = self.y_star(x, data);
        let r: Vec<S> = ys.iter().zip(&b).map(|(&s, &bi)| s - bi).collect();
        let t = self.a.matvec_t(&r);
        x.iter().zip(&a).zip(&t).map(|((&xi, &ai), &ti)| xi - ai + ti).collect()
    }

    /// `∇L*_λ(x) = x − mean(a) + λ/(1+λ) · Aᵀ(y*(x) − mean(b))`.
    pub fn penalty_gradient(&self, x: &[S], lambda: S, data: &Dataset<S>) -> Vec<S> {
        let (a, b, _) = self.means(data);
        let ys = self.y_star(x, data);
        let w = lambda / (S::one() + lambda);
        let r: Vec<S> = ys.iter().zip(&b).map(|(&s, &bi)| w * (s - bi)).collect();
        let t = self.a.matvec_t(&r);
        x.iter().zip(&a).zip(&t).map(|((&xi, &ai), &ti)| xi - ai + ti).collect()
    }

    /// `F(x) = mean f(x, y*(x); ξ)`.
    pub fn hyperobjective(&self, x: &[S], data: &Dataset<S>) -> S {
        let ys = self.y_star(x, data);
        let total: S = data.records().map(|r| self.value_f(x, &ys, r).unwrap_or(S::zero())).sum();
        total / S::from_count(data.len())
    }

    /// Minimiser of `F` over `X`, by projected gradient descent on the
    /// closed-form hypergradient (a strongly convex quadratic).
    pub fn hyper_minimizer(&self, data: &Dataset<S>) -> Vec<S> {
        let step = S::one() / (S::one() + self.coupling_norm * self.coupling_norm);
        let mut x = vec![S::zero(); self.dim_x];
        for _ in 0..100_000 {
            let g = self.hypergradient(&x, data);
            let next = self.feasible.prox_step(&x, &g, step);
            let moved = crate::linalg::dist(&next, &x);
            x = next;
            if moved <= S::epsilon() * S::lit(10.0) * (S::one() + norm(&x)) {
                break;
            }
        }
        x
    }
}

fn random_direction<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= radius / n);
    }
    v
}

fn uniform_in_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let u: f64 = rng.random();
    random_direction(rng, dim, radius * u.powf(1.0 / dim as f64))
}

impl<S: Real> BilevelProblem<S> for QuadraticBilevel<S> {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn dim_x(&self) -> usize {
        self.dim_x
    }
    fn dim_y(&self) -> usize {
        self.dim_y
    }
    fn record_len(&self) -> usize {
        self.dim_x + 2 * self.dim_y
    }
    fn constants(&self) -> &ProblemConstants<S> {
        &self.constants
    }
    fn feasible_x(&self) -> &ConvexSet<S> {
        &self.feasible
    }
    fn certified_x(&self) -> ConvexSet<S> {
        ConvexSet::Ball { center: vec![S::zero(); self.a.cols()], radius: S::lit(self.bounds.x_radius) }
    }
    fn inner_domain(&self) -> InnerDomain<S> {
        self.domain.clone()
    }

    fn per_sample_gradient(&self, which: OracleKind, x: &[S], y: &[S], r: &[S], out: &mut [S]) {
        let (dx, dy) = (self.dim_x, self.dim_y);
        let (a, rest) = r.split_at(dx);
        let (b, c) = rest.split_at(dy);
        match which {
            OracleKind::GradXF => {
                for j in 0..dx {
                    out[j] = x[j] - a[j];
                }
            }
            OracleKind::GradYF => {
                for j in 0..dy {
                    out[j] = y[j] - b[j];
                }
            }
            OracleKind::GradYG | OracleKind::GradXG => {
                let mut res = self.a.matvec(x);
                for j in 0..dy {
                    res[j] = y[j] - res[j] - c[j];
                }
                if which == OracleKind::GradYG {
                    out[..dy].copy_from_slice(&res);
                } else {
                    self.a.matvec_t_into(&res, out);
                    out.iter_mut().for_each(|v| *v = -*v);
                }
            }
        }
    }

    fn value_f(&self, x: &[S], y: &[S], r: &[S]) -> Option<S> {
        let (a, rest) = r.split_at(self.dim_x);
        let b = &rest[..self.dim_y];
        let half = S::lit(0.5);
        Some(half * crate::linalg::dist(x, a).powi(2) + half * crate::linalg::dist(y, b).powi(2))
    }

    fn value_g(&self, x: &[S], y: &[S], r: &[S]) -> Option<S> {
        let c = &r[self.dim_x + self.dim_y..];
        let ax = self.a.matvec(x);
        let s: S = (0..self.dim_y).map(|j| (y[j] - ax[j] - c[j]).powi(2)).sum();
        Some(S::lit(0.5) * s)
    }

    fn hessian_yy_g(&self, _x: &[S], _y: &[S], _r: &[S]) -> Option<Matrix<S>> {
        Some(Matrix::identity(self.dim_y))
    }

    fn hessian_xy_g(&self, _x: &[S], _y: &[S], _r: &[S]) -> Option<Matrix<S>> {
        Some(self.a.transpose().scaled(-S::one()))
    }

    fn hessian_yy_f(&self, _x: &[S], _y: &[S], _r: &[S]) -> Option<Matrix<S>> {
        Some(Matrix::identity(self.dim_y))
    }

    fn f_curvature_floor(&self) -> S {
        S::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::full_batch_gradient;
    use approx::assert_relative_eq;

    #[test]
    fn identity_coupling_shifts_by_mean_c() {
        let p = QuadraticBilevel::new(Matrix::identity(2), QuadraticBounds::default()).unwrap();
        let data = Dataset::from_records(&[vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p.y_star(&[0.25, 0.5], &data), vec![0.75, 0.0]);
    }

    #[test]
    fn generated_records_respect_bounds() {
        let g = QuadraticGenerator { n: 500, dim_x: 3, dim_y: 4, ..Default::default() };
        let (p, data) = QuadraticBilevel::<f64>::generate(&g, 3).unwrap();
        assert_relative_eq!(p.coupling_norm(), 0.5, max_relative = 1e-9);
        for r in data.records() {
            assert!(norm(&r[..3]) <= 1.0 + 1e-12);
            assert!(norm(&r[3..7]) <= 1.0 + 1e-12);
            assert!(norm(&r[7..]) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn closed_form_penalty_gradient_matches_oracles() {
        let (p, data) = QuadraticBilevel::<f64>::generate(&QuadraticGenerator::default(), 1).unwrap();
        let x = [0.3, -0.2];
        let lambda = 7.0;
        let yl = p.y_lambda(&x, lambda, &data);
        let ys = p.y_star(&x, &data);
        let fx = full_batch_gradient(&p, OracleKind::GradXF, &x, &yl, &data).unwrap();
        let g1 = full_batch_gradient(&p, OracleKind::GradXG, &x, &yl, &data).unwrap();
        let g0 = full_batch_gradient(&p, OracleKind::GradXG, &x, &ys, &data).unwrap();
        let via_oracles: Vec<f64> = (0..2).map(|j| fx[j] + lambda * (g1[j] - g0[j])).collect();
        let closed = p.penalty_gradient(&x, lambda, &data);
        for j in 0..2 {
            assert_relative_eq!(via_oracles[j], closed[j], epsilon = 1e-12);
        }
    }
}
