//! Closed convex sets with exact Euclidean projection, and the prox step and
//! gradient mapping built on top of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist, norm};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "S: Real")]
pub enum ConvexSet<S> {
    WholeSpace {
        dim: usize,
    },
    Ball {
        center: Vec<S>,
        radius: S,
    },
    Box {
        lo: Vec<S>,
        hi: Vec<S>,
    },
    NonnegOrthant {
        dim: usize,
    },
    /// `{u >= 0, Σ u = scale}`
    Simplex {
        dim: usize,
        scale: S,
    },
}

impl<S: Real> ConvexSet<S> {
    pub fn ball(center: Vec<S>, radius: S) -> Result<Self> {
        let s = ConvexSet::Ball { center, radius };
        s.validate()?;
        Ok(s)
    }

    pub fn boxed(lo: Vec<S>, hi: Vec<S>) -> Result<Self> {
        let s = ConvexSet::Box { lo, hi };
        s.validate()?;
        Ok(s)
    }

    pub fn simplex(dim: usize, scale: S) -> Result<Self> {
        let s = ConvexSet::Simplex { dim, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Ball { radius, .. } if !(*radius > S::zero()) => Err(Error::param("radius", "ball radius must be positive")),
            ConvexSet::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::DimensionMismatch { context: "box bounds".into(), expected: lo.len(), got: hi.len() });
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(Error::param("box", "lo must not exceed hi"));
                }
                Ok(())
            }
            ConvexSet::Simplex { scale, dim } => {
                if !(*scale > S::zero()) || *dim == 0 {
                    Err(Error::param("simplex", "scale must be positive and dim non-zero"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::WholeSpace { dim } | ConvexSet::NonnegOrthant { dim } | ConvexSet::Simplex { dim, .. } => *dim,
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Box { lo, .. } => lo.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConvexSet::WholeSpace { .. } => "whole_space",
            ConvexSet::Ball { .. } => "ball",
            ConvexSet::Box { .. } => "box",
            ConvexSet::NonnegOrthant { .. } => "nonneg_orthant",
            ConvexSet::Simplex { .. } => "simplex",
        }
    }

    /// Euclidean projection.
    pub fn project(&self, z: &[S]) -> Vec<S> {
        let mut out = z.to_vec();
        self.project_in_place(&mut out);
        out
    }

    pub fn project_in_place(&self, z: &mut [S]) {
        debug_assert_eq!(z.len(), self.dim());
        match self {
            ConvexSet::WholeSpace { .. } => {}
            ConvexSet::Ball { center, radius } => {
                let d = dist(z, center);
                if d > *radius {
                    let s = *radius / d;
                    for (zi, &ci) in z.iter_mut().zip(center) {
                        *zi = ci + (*zi - ci) * s;
                    }
                }
            }
            ConvexSet::Box { lo, hi } => {
                for ((zi, &l), &h) in z.iter_mut().zip(lo).zip(hi) {
                    *zi = zi.max(l).min(h);
                }
            }
            ConvexSet::NonnegOrthant { .. } => {
                z.iter_mut().for_each(|zi| *zi = zi.max(S::zero()));
            }
            ConvexSet::Simplex { scale, .. } => project_simplex(z, *scale),
        }
    }

    /// Membership up to a relative tolerance `tol`.
    pub fn contains_tol(&self, x: &[S], tol: S) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let slack = tol * (S::one() + norm(x));
        match self {
            ConvexSet::WholeSpace { .. } => true,
            ConvexSet::Ball { center, radius } => dist(x, center) <= *radius + slack,
            ConvexSet::Box { lo, hi } => x.iter().zip(lo).zip(hi).all(|((&v, &l), &h)| v >= l - slack && v <= h + slack),
            ConvexSet::NonnegOrthant { .. } => x.iter().all(|&v| v >= -slack),
            ConvexSet::Simplex { scale, .. } => {
                let s: S = x.iter().copied().sum();
                x.iter().all(|&v| v >= -slack) && (s - *scale).abs() <= slack * S::from_count(x.len())
            }
        }
    }

    pub fn contains(&self, x: &[S]) -> bool {
        self.contains_tol(x, S::epsilon().sqrt() * S::lit(1e-2))
    }

    /// `argmin_{u ∈ set} ⟨v, u⟩ + ‖u − x‖²/(2η)`, i.e. `project(x − ηv)`.
    pub fn prox_step(&self, x: &[S], v: &[S], eta: S) -> Vec<S> {
        let mut z: Vec<S> = x.iter().zip(v).map(|(&xi, &vi)| xi - eta * vi).collect();
        self.project_in_place(&mut z);
        z
    }

    /// `(x − P_{v,η}(x)) / η`; requires `x` in the set.
    pub fn gradient_mapping(&self, x: &[S], v: &[S], eta: S) -> Result<Vec<S>> {
        if !(eta > S::zero()) {
            return Err(Error::param("eta", "step size must be positive"));
        }
        if x.len() != self.dim() || v.len() != self.dim() {
            return Err(Error::DimensionMismatch { context: "gradient_mapping".into(), expected: self.dim(), got: x.len() });
        }
        if !self.contains(x) {
            return Err(Error::NotInSet);
        }
        if let ConvexSet::WholeSpace { .. } = self {
            return Ok(v.to_vec());
        }
        let p = self.prox_step(x, v, eta);
        Ok(x.iter().zip(&p).map(|(&a, &b)| (a - b) / eta).collect())
    }
}

/// Sort-based projection onto `{u >= 0, Σ u = scale}`.
fn project_simplex<S: Real>(z: &mut [S], scale: S) {
    let mut sorted: Vec<S> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = S::zero();
    let mut theta = S::zero();
    for (k, &u) in sorted.iter().enumerate() {
        cumsum = cumsum + u;
        let t = (cumsum - scale) / S::from_count(k + 1);
        if u - t > S::zero() {
            theta = t;
        }
    }
    z.iter_mut().for_each(|v| *v = (*v - theta).max(S::zero()));
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ball_radial_rescale() {
        let b = ConvexSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        let p = b.project(&[3.0, 4.0]);
        assert_relative_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.8, epsilon = 1e-15);
        assert_eq!(b.project(&[0.1, 0.2]), vec![0.1, 0.2]);
    }

    #[test]
    fn simplex_symmetric_point() {
        let s = ConvexSet::simplex(2, 1.0).unwrap();
        let p = s.project(&[0.9, 0.9]);
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn prox_examples() {
        let w = ConvexSet::WholeSpace { dim: 2 };
        assert_eq!(w.prox_step(&[1.0, 2.0], &[1.0, 0.0], 0.5), vec![0.5, 2.0]);
        let o = ConvexSet::NonnegOrthant { dim: 1 };
        assert_eq!(o.prox_step(&[0.3], &[1.0], 0.5), vec![0.0]);
        let b = ConvexSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(b.prox_step(&[1.0, 0.0], &[-2.0, 0.0], 1.0), vec![1.0, 0.0]);
    }

    #[test]
    fn gradient_mapping_examples() {
        let w = ConvexSet::WholeSpace { dim: 2 };
        assert_eq!(w.gradient_mapping(&[5.0, 1.0], &[0.3, -0.7], 0.1).unwrap(), vec![0.3, -0.7]);
        let o = ConvexSet::NonnegOrthant { dim: 1 };
        assert_eq!(o.gradient_mapping(&[0.1], &[0.0], 0.5).unwrap(), vec![0.0]);
        assert_relative_eq!(o.gradient_mapping(&[0.1], &[1.0], 0.5).unwrap()[0], 0.2, epsilon = 1e-15);
        assert!(matches!(o.gradient_mapping(&[-1.0], &[1.0], 0.5), Err(Error::NotInSet)));
    }

    #[test]
    fn invalid_sets_rejected() {
        assert!(ConvexSet::<f64>::ball(vec![0.0], 0.0).is_err());
        assert!(ConvexSet::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(ConvexSet::<f64>::simplex(2, -1.0).is_err());
    }
}
