//! Stochastic scene-level capture degradation: global contrast, brightness
//! and additive Gaussian sensor noise, clamped to the valid range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{clamp_with_grad, Grid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureParams {
    pub gamma: f64,
    pub delta: f64,
    pub sigma: f64,
    pub noise_seed: u64,
}

impl CaptureParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            delta: 0.0,
            sigma: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureDistribution {
    pub gamma: (f64, f64),
    pub delta: (f64, f64),
    pub sigma: (f64, f64),
    /// Monte Carlo samples per image per step.
    pub k: usize,
}

impl Default for CaptureDistribution {
    fn default() -> Self {
        Self {
            gamma: (0.85, 1.15),
            delta: (-0.08, 0.08),
            sigma: (0.0, 0.05),
            k: 4,
        }
    }
}

impl CaptureDistribution {
    /// All ranges collapsed to the identity transform.
    pub fn identity(k: usize) -> Self {
        Self {
            gamma: (1.0, 1.0),
            delta: (0.0, 0.0),
            sigma: (0.0, 0.0),
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("EOT sample count K must be at least 1"));
        }
        let checks = [
            ("gamma", self.gamma, 1.0),
            ("delta", self.delta, 0.0),
            ("sigma", self.sigma, 0.0),
        ];
        for (name, (lo, hi), id) in checks {
            if !(lo <= id && id <= hi) {
                return Err(Error::invalid(format!(
                    "capture range {name} [{lo}, {hi}] must contain the identity value {id}"
                )));
            }
        }
        if self.sigma.0 < 0.0 {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_capture(dist: &CaptureDistribution, rng: &mut ChaCha8Rng) -> CaptureParams {
    CaptureParams {
        gamma: draw(rng, dist.gamma),
        delta: draw(rng, dist.delta),
        sigma: draw(rng, dist.sigma),
        noise_seed: rng.random(),
    }
}

fn noise_field(xi: &CaptureParams, n: usize) -> Vec<f64> {
    if xi.sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(xi.noise_seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            xi.sigma * z
        })
        .collect()
}

/// Applies the capture transform; also returns the per-texel derivative of
/// the output w.r.t. the input (`gamma` inside the clamp range, else 0).
pub fn apply_capture_with_grad(x_hat: &Grid, xi: &CaptureParams) -> (Grid, Vec<f64>) {
    let noise = noise_field(xi, x_hat.len());
    let mut out = x_hat.clone();
    let mut deriv = vec![0.0; x_hat.len()];
    for ((v, d), n) in out.values_mut().iter_mut().zip(&mut deriv).zip(&noise) {
        let (c, g) = clamp_with_grad(xi.gamma * *v + xi.delta + n, 0.0, 1.0);
        *v = c;
        *d = xi.gamma * g;
    }
    (out, deriv)
}

pub fn apply_capture(x_hat: &Grid, xi: &CaptureParams) -> Grid {
    if *xi == CaptureParams::identity() {
        return x_hat.clone();
    }
    apply_capture_with_grad(x_hat, xi).0
}
