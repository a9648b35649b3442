//! Spike-and-slab prior over `(W, γ, B, θ)` at fixed depth.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{param_count, Architecture, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub lambda_w: f64,
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub depth: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            lambda_w: 1.0,
            lambda_s: 2.0,
            lambda_b: 1.0,
            depth: 3,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_s", self.lambda_s),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.depth == 0 {
            return Err(Error::InvalidArgument("depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Log of the zero-truncated Poisson mass at `w`.
    pub fn log_width_pmf(&self, w: usize) -> Result<f64> {
        if w < 1 {
            return Err(Error::InvalidArgument("width must be >= 1".into()));
        }
        let log_fact: f64 = (2..=w).map(|j| (j as f64).ln()).sum();
        Ok(w as f64 * self.lambda_w.ln() - self.lambda_w.exp_m1().ln() - log_fact)
    }

    /// `(log p, log(1 − p))` with `p = 1/(1 + T^{λ_S})`.
    pub fn log_activation(&self, t: usize) -> (f64, f64) {
        let lt = self.lambda_s * (t as f64).ln();
        // log(1 + e^{lt}) computed stably
        let softplus = if lt > 0.0 {
            lt + (-lt).exp().ln_1p()
        } else {
            lt.exp().ln_1p()
        };
        (-softplus, lt - softplus)
    }

    pub fn activation_prob(&self, t: usize) -> f64 {
        self.log_activation(t).0.exp()
    }
}

/// Zero-truncated Poisson mass `λ^w / ((e^λ − 1) w!)`.
pub fn width_pmf(cfg: &PriorConfig, w: usize) -> Result<f64> {
    Ok(cfg.log_width_pmf(w)?.exp())
}

/// `2T/(1 + T^{λ_S})`, the expected-sparsity ratio bounded by the sieve argument.
pub fn sparsity_ratio(t: usize, lambda_s: f64) -> f64 {
    2.0 * t as f64 / (1.0 + (t as f64).powf(lambda_s))
}

fn sample_width<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut w = 1;
    loop {
        acc += width_pmf(cfg, w).expect("w >= 1");
        // The tail beyond the accumulated mass is below double precision once
        // the pmf underflows.
        if u < acc || width_pmf(cfg, w).expect("w >= 1") < 1e-300 {
            return w;
        }
        w += 1;
    }
}

/// Draws `(W, γ, B, θ)` from the prior for input dimension `d`.
pub fn sample_prior<R: Rng + ?Sized>(cfg: &PriorConfig, d: usize, rng: &mut R) -> Result<NetworkParams> {
    cfg.validate()?;
    let w = sample_width(cfg, rng);
    let mut arch = Architecture::empty(d, cfg.depth, w)?;
    let t = arch.num_params();
    let p = cfg.activation_prob(t);
    let bound = Exp::new(cfg.lambda_b)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sample(rng);
    // An exponential draw of exactly zero has probability zero but is not
    // representable as a valid bound.
    let bound = if bound > 0.0 { bound } else { f64::MIN_POSITIVE };
    let mut theta = vec![0.0; t];
    for (m, th) in arch.mask.iter_mut().zip(theta.iter_mut()) {
        if rng.random::<f64>() < p {
            *m = true;
            *th = rng.random_range(-bound..=bound);
        }
    }
    NetworkParams::new(arch, theta, bound)
}

/// Log prior density; `−∞` for states outside the support.
///
/// The reference measure is counting on `W` and `γ`, Lebesgue on `B` and on
/// the `S` active coordinates.
pub fn log_prior_density(cfg: &PriorConfig, params: &NetworkParams) -> f64 {
    let a = &params.arch;
    if a.depth != cfg.depth || a.width < 1 || !(params.bound > 0.0) {
        return f64::NEG_INFINITY;
    }
    let b = params.bound;
    for (&th, &m) in params.theta.iter().zip(&a.mask) {
        if th.abs() > b || (!m && th != 0.0) {
            return f64::NEG_INFINITY;
        }
    }
    let t = param_count(a.input_dim, a.depth, a.width);
    let s = a.sparsity();
    let (lp, lq) = cfg.log_activation(t);
    cfg.log_width_pmf(a.width).expect("width >= 1")
        + s as f64 * lp
        + (t - s) as f64 * lq
        + cfg.lambda_b.ln()
        - cfg.lambda_b * b
        - s as f64 * (2.0 * b).ln()
}
