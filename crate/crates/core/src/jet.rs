//! Second-order forward-mode jets with respect to a spatial input.
//!
//! A [`Jet2`] carries a value together with its gradient and Hessian with
//! respect to a `d`-dimensional point. Networks, splines and PDE residuals
//! all evaluate to jets so that `u`, `∇u` and `∇²u` come out of a single pass.

use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};

pub type GradBuf = SmallVec<[f64; 3]>;
pub type HessBuf = SmallVec<[f64; 9]>;

/// Value, gradient and dense symmetric Hessian (row-major `d × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jet2 {
    pub value: f64,
    pub grad: GradBuf,
    pub hess: HessBuf,
}

impl Jet2 {
    pub fn zero(dim: usize) -> Self {
        Self::constant(0.0, dim)
    }

    pub fn constant(value: f64, dim: usize) -> Self {
        Jet2 {
            value,
            grad: smallvec![0.0; dim],
            hess: smallvec![0.0; dim * dim],
        }
    }

    /// Builds a jet from explicit parts. The Hessian is symmetrized.
    pub fn from_parts(value: f64, grad: &[f64], hess: &[f64]) -> Result<Self> {
        let d = grad.len();
        if hess.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: hess.len(),
            });
        }
        let mut h: HessBuf = SmallVec::from_slice(hess);
        for i in 0..d {
            for j in (i + 1)..d {
                let s = 0.5 * (h[i * d + j] + h[j * d + i]);
                h[i * d + j] = s;
                h[j * d + i] = s;
            }
        }
        Ok(Jet2 {
            value,
            grad: SmallVec::from_slice(grad),
            hess: h,
        })
    }

    /// Seeds differentiation of the linear functional `x ↦ w·x`.
    pub fn lift(x: &[f64], weights: &[f64]) -> Result<Self> {
        if x.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: weights.len(),
            });
        }
        let d = x.len();
        let value = x.iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(Jet2 {
            value,
            grad: SmallVec::from_slice(weights),
            hess: smallvec![0.0; d * d],
        })
    }

    /// The coordinate function `x ↦ x_axis` at `x`.
    pub fn coordinate(x: &[f64], axis: usize) -> Self {
        let d = x.len();
        let mut grad: GradBuf = smallvec![0.0; d];
        grad[axis] = 1.0;
        Jet2 {
            value: x[axis],
            grad,
            hess: smallvec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_at(&self, i: usize, j: usize) -> f64 {
        self.hess[i * self.dim() + j]
    }

    /// Trace of the Hessian.
    pub fn laplacian(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|i| self.hess[i * d + i]).sum()
    }

    fn check_dim(&self, other: &Jet2) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Jet2) -> Result<Jet2> {
        self.check_dim(other)?;
        Ok(Jet2 {
            value: self.value + other.value,
            grad: self.grad.iter().zip(&other.grad).map(|(a, b)| a + b).collect(),
            hess: self.hess.iter().zip(&other.hess).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Jet2) -> Result<Jet2> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Jet2 {
        Jet2 {
            value: c * self.value,
            grad: self.grad.iter().map(|g| c * g).collect(),
            hess: self.hess.iter().map(|h| c * h).collect(),
        }
    }

    /// `self + c·other`, in place.
    pub fn axpy(&mut self, c: f64, other: &Jet2) {
        debug_assert_eq!(self.dim(), other.dim());
        self.value += c * other.value;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += c * b;
        }
        for (a, b) in self.hess.iter_mut().zip(&other.hess) {
            *a += c * b;
        }
    }

    /// Product rule to second order.
    pub fn mul(&self, other: &Jet2) -> Result<Jet2> {
        self.check_dim(other)?;
        let d = self.dim();
        let (a, b) = (self, other);
        let grad = (0..d)
            .map(|i| a.value * b.grad[i] + b.value * a.grad[i])
            .collect();
        let mut hess: HessBuf = smallvec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let k = i * d + j;
                let h = a.value * b.hess[k]
                    + b.value * a.hess[k]
                    + (a.grad[i] * b.grad[j] + a.grad[j] * b.grad[i]);
                hess[k] = h;
                hess[j * d + i] = h;
            }
        }
        Ok(Jet2 {
            value: a.value * b.value,
            grad,
            hess,
        })
    }

    /// Outer composition with a scalar function given `(φ(s), φ'(s), φ''(s))`.
    pub fn compose(&self, phi: f64, dphi: f64, ddphi: f64) -> Jet2 {
        let d = self.dim();
        let mut hess: HessBuf = smallvec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let h = dphi * self.hess[i * d + j] + ddphi * self.grad[i] * self.grad[j];
                hess[i * d + j] = h;
                hess[j * d + i] = h;
            }
        }
        Jet2 {
            value: phi,
            grad: self.grad.iter().map(|g| dphi * g).collect(),
            hess,
        }
    }

    /// The ReLU cube `max(s, 0)^3` applied to the jet.
    ///
    /// At `s <= 0` every derivative order vanishes (the two-sided limit at the kink).
    pub fn sigma3(&self) -> Jet2 {
        let (v, d1, d2) = sigma3_derivs(self.value);
        if v == 0.0 && d1 == 0.0 {
            return Jet2::zero(self.dim());
        }
        self.compose(v, d1, d2)
    }

    pub fn max_abs_diff(&self, other: &Jet2) -> (f64, f64, f64) {
        let dv = (self.value - other.value).abs();
        let dg = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dh = self
            .hess
            .iter()
            .zip(&other.hess)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (dv, dg, dh)
    }
}

/// `(σ3(s), σ3'(s), σ3''(s))`.
#[inline]
pub fn sigma3_derivs(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        let s2 = s * s;
        (s2 * s, 3.0 * s2, 6.0 * s)
    }
}

#[inline]
pub fn sigma3(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        s * s * s
    }
}
