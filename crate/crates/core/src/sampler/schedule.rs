use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

/// Linear-β noise schedule with cumulative products `ᾱ_τ`, `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn new(config: &SchedulerConfig) -> Result<Self> {
        let SchedulerConfig { steps, beta_start, beta_end } = *config;
        if steps == 0 {
            return Err(Error::Parameter { name: "steps", reason: "must be at least 1".into() });
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter {
                name: "beta",
                reason: format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            });
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, timestep: usize) -> f64 {
        self.betas[timestep - 1]
    }

    /// `ᾱ_τ` for `τ` in `0..=T`.
    pub fn alpha_bar(&self, timestep: usize) -> f64 {
        self.alpha_bars[timestep]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, timestep: usize) -> Result<()> {
        if timestep == 0 || timestep > self.steps() {
            return Err(Error::Step { step: timestep, steps: self.steps() });
        }
        Ok(())
    }

    /// Forward noising `z_τ = √ᾱ_τ z0 + √(1−ᾱ_τ) ε`; `τ = 0` returns `z0`.
    pub fn add_noise(&self, z0: &Matrix, noise: &Matrix, timestep: usize) -> Result<Matrix> {
        if timestep > self.steps() {
            return Err(Error::Step { step: timestep, steps: self.steps() });
        }
        if z0.shape() != noise.shape() {
            return Err(Error::shapes("latent vs noise", z0.shape(), noise.shape()));
        }
        let ab = self.alpha_bars[timestep];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
        Ok(Matrix::from_raw(z0.rows(), z0.cols(), data))
    }

    /// Deterministic DDIM (η = 0) update from `τ` to `τ − 1`.
    pub fn ddim_step(&self, latent: &Matrix, predicted_noise: &Matrix, timestep: usize) -> Result<Matrix> {
        self.check(timestep)?;
        if latent.shape() != predicted_noise.shape() {
            return Err(Error::shapes("latent vs predicted noise", latent.shape(), predicted_noise.shape()));
        }
        Ok(ddim_update(
            latent,
            predicted_noise,
            self.alpha_bars[timestep],
            self.alpha_bars[timestep - 1],
        ))
    }
}

/// `x̂0 = (z − √(1−ᾱ_τ) ε̂)/√ᾱ_τ`, then `√ᾱ_prev x̂0 + √(1−ᾱ_prev) ε̂`.
/// With `ᾱ_prev = 1` the result is `x̂0` itself.
pub fn ddim_update(latent: &Matrix, predicted_noise: &Matrix, alpha_bar: f64, alpha_bar_prev: f64) -> Matrix {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let data = latent
        .data()
        .iter()
        .zip(predicted_noise.data())
        .map(|(&z, &e)| {
            let x0 = (z - sb * e) / sa;
            if alpha_bar_prev == 1.0 {
                x0
            } else {
                pa * x0 + pb * e
            }
        })
        .collect();
    Matrix::from_raw(latent.rows(), latent.cols(), data)
}
