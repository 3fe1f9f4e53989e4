//! Deterministic DDIM (eta = 0) sampling and inversion over the
//! scaled-linear beta schedule used by Stable Diffusion.

use serde::{Deserialize, Serialize};

use crate::backbone::Latent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdimConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.000_85,
            beta_end: 0.012,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ddim {
    config: DdimConfig,
    alphas_cumprod: Vec<f64>,
}

impl Ddim {
    pub fn new(config: DdimConfig) -> Self {
        let n = config.train_steps;
        let (a, b) = (config.beta_start.sqrt(), config.beta_end.sqrt());
        let mut prod = 1.0;
        let alphas_cumprod = (0..n)
            .map(|i| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let beta = (a + (b - a) * frac).powi(2);
                prod *= 1.0 - beta;
                prod
            })
            .collect();
        Self {
            config,
            alphas_cumprod,
        }
    }

    pub fn config(&self) -> DdimConfig {
        self.config
    }

    /// Cumulative alpha at `timestep`; `None` denotes the clean end of the
    /// chain, where it is 1.
    pub fn alpha_bar(&self, timestep: Option<usize>) -> f64 {
        timestep.map_or(1.0, |t| self.alphas_cumprod[t])
    }

    /// Descending sampling timesteps with trailing spacing: the first step is
    /// always the last training timestep, so every step count starts from the
    /// same noise level.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.config.train_steps;
        if steps == 0 || steps > n {
            return Err(Error::Validation(format!(
                "step count must be in 1..={n}, got {steps}"
            )));
        }
        let stride = n as f64 / steps as f64;
        Ok((0..steps)
            .map(|i| ((n as f64 - i as f64 * stride).round() as usize).saturating_sub(1))
            .collect())
    }

    /// Checks that `schedule` is a strictly descending list of valid timesteps.
    pub fn check_descending(&self, schedule: &[usize]) -> Result<()> {
        if schedule.is_empty() {
            return Err(Error::Contract("empty timestep schedule".into()));
        }
        if schedule.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Contract(format!(
                "schedule is not strictly descending: {schedule:?}"
            )));
        }
        if schedule[0] >= self.config.train_steps {
            return Err(Error::Contract(format!(
                "timestep {} outside the {}-step training schedule",
                schedule[0], self.config.train_steps
            )));
        }
        Ok(())
    }

    /// One denoising step from `t` to `prev` given the predicted noise.
    pub fn step(&self, latent: &Latent, eps: &Latent, t: usize, prev: Option<usize>) -> Latent {
        self.transfer(latent, eps, self.alpha_bar(Some(t)), self.alpha_bar(prev))
    }

    /// One inversion step from `prev` (the cleaner level) up to `t`.
    pub fn invert_step(&self, latent: &Latent, eps: &Latent, prev: Option<usize>, t: usize) -> Latent {
        self.transfer(latent, eps, self.alpha_bar(prev), self.alpha_bar(Some(t)))
    }

    /// Moves `latent` from noise level `from` to level `to` along the
    /// deterministic DDIM update.
    fn transfer(&self, latent: &Latent, eps: &Latent, from: f64, to: f64) -> Latent {
        let (sa, sb) = (from.sqrt() as f32, (1.0 - from).sqrt() as f32);
        let (ta, tb) = (to.sqrt() as f32, (1.0 - to).sqrt() as f32);
        let mut out = latent.clone();
        ndarray::Zip::from(&mut out).and(eps).for_each(|z, &e| {
            let x0 = (*z - sb * e) / sa;
            *z = ta * x0 + tb * e;
        });
        out
    }
}

/// The level below `schedule[i]` in a descending schedule.
pub fn previous(schedule: &[usize], i: usize) -> Option<usize> {
    schedule.get(i + 1).copied()
}
