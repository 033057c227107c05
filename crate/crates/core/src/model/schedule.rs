//! Variance schedule and the closed-form forward (noising) process.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-4;
const BETA_MAX: f64 = 0.999;

/// `betas[i]` and `alpha_bars[i]` describe diffusion step `t = i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

fn cosine_f(u: f64) -> f64 {
    let c = ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
    c * c
}

/// Cosine schedule with `steps` entries. Betas are back-solved from the
/// cosine `ᾱ` curve, clipped, and `ᾱ` is then rebuilt as the running product
/// of `1 - β` so the two tables agree exactly.
pub fn make_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::validation("diffusion schedule needs at least one step"));
    }
    let f0 = cosine_f(0.0);
    let target: Vec<f64> = (0..=steps).map(|t| cosine_f(t as f64 / steps as f64) / f0).collect();
    let betas: Vec<f64> = (1..=steps)
        .map(|t| (1.0 - target[t] / target[t - 1]).clamp(BETA_MIN, BETA_MAX))
        .collect();
    Ok(DiffusionSchedule::from_betas(betas))
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        DiffusionSchedule { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::validation(format!("diffusion step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Mean coefficients `(c_x0, c_xt)` and variance of `q(x_{t-1} | x_t, x̂₀)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
        (c_x0, c_xt, var)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != self.alpha_bars.len() || self.betas.is_empty() {
            return Err(Error::format("schedule tables disagree in length"));
        }
        if !self.betas.iter().chain(&self.alpha_bars).all(|v| *v > 0.0 && *v < 1.0) {
            return Err(Error::format("schedule values outside (0, 1)"));
        }
        Ok(())
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`, element-wise.
pub fn q_sample(schedule: &DiffusionSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::validation("x0 and eps differ in shape"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}
