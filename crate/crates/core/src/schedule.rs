//! Discrete diffusion coefficients and the elementary forward/reverse steps.
//!
//! A [`NoiseSchedule`] holds the per-step variances `beta`, the cumulative
//! products `alpha_bar` and the sampling noise scales `sigma`. Step indices
//! are zero-based: `t` ranges over `0..T`, `alpha_bar[t]` is the cumulative
//! product through step `t`, and the virtual level below `t = 0` is clean
//! data with cumulative product 1.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AtdError, Result};
use crate::seed::StableHasher;

/// Immutable diffusion coefficients shared by score models, the trainers and
/// the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
}

/// Serializable schedule parameters (the schedule itself is derived).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 30,
            beta_start: 1e-4,
            beta_end: 0.2,
            eta: 0.0,
        }
    }
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances.
    ///
    /// `eta` in `[0, 1]` scales the stochastic part of the reverse step;
    /// `eta = 0` gives the deterministic sampler.
    pub fn from_betas(beta: Vec<f64>, eta: f64) -> Result<Self> {
        if beta.is_empty() {
            return Err(AtdError::InvalidParam("beta schedule is empty".into()));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(AtdError::InvalidParam(format!("eta {eta} not in [0, 1]")));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(AtdError::InvalidParam(
                "every beta must lie in (0, 1)".into(),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut sigma = Vec::with_capacity(beta.len());
        for t in 0..beta.len() {
            let a_t = alpha_bar[t];
            let a_prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
            // DDIM variance: sigma_t = eta * sqrt((1-a_prev)/(1-a_t)) * sqrt(1 - a_t/a_prev)
            let s = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
            sigma.push(s);
        }
        Ok(Self {
            beta,
            alpha_bar,
            sigma,
            eta,
        })
    }

    /// Linear beta ramp over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(AtdError::InvalidParam("steps must be >= 1".into()));
        }
        let beta = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta, eta)
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_start, p.beta_end, p.eta)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Cumulative product one level below `t` (1 for `t = 0`).
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            Err(AtdError::StepOutOfRange {
                step: t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noise(&self, x0: &Array2<f64>, t: usize, eps: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_step(t)?;
        if x0.dim() != eps.dim() {
            return Err(AtdError::ShapeMismatch(format!(
                "x0 {:?} vs eps {:?}",
                x0.dim(),
                eps.dim()
            )));
        }
        let a = self.alpha_bar[t];
        Ok(x0 * a.sqrt() + eps * (1.0 - a).sqrt())
    }

    /// Denoised estimate `x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
    pub fn tweedie(&self, x_t: &Array2<f64>, eps_hat: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        self.check_step(t)?;
        let a = self.alpha_bar[t];
        Ok((x_t - eps_hat * (1.0 - a).sqrt()) / a.sqrt())
    }

    /// Scalar form of [`Self::tweedie`], used on flat rows in the hot path.
    #[inline]
    pub fn tweedie_coeffs(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (1.0 / a.sqrt(), (1.0 - a).sqrt() / a.sqrt())
    }

    /// One reverse step from level `t` to level `t - 1` (clean output at
    /// `t = 0`, where the injected noise is ignored; `sigma[0]` is always 0).
    pub fn ddim_step(
        &self,
        x_t: &Array2<f64>,
        eps_hat: &Array2<f64>,
        t: usize,
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_step(t)?;
        let a_prev = self.alpha_bar_prev(t);
        let sigma = self.sigma[t];
        let radicand = 1.0 - a_prev - sigma * sigma;
        if radicand < 0.0 {
            return Err(AtdError::InvalidParam(format!(
                "negative radicand {radicand} at step {t}: sigma violates the schedule invariant"
            )));
        }
        let x0 = self.tweedie(x_t, eps_hat, t)?;
        let mut out = x0 * a_prev.sqrt() + eps_hat * radicand.sqrt();
        if t > 0 && sigma > 0.0 {
            out = out + noise * sigma;
        }
        Ok(out)
    }

    /// Stable hash over `(T, beta, eta)`; stored in checkpoints so a model is
    /// never silently resumed under a different schedule.
    pub fn content_hash(&self) -> u64 {
        let mut h = StableHasher::new("noise-schedule");
        h.write_u64(self.beta.len() as u64);
        h.write_f64_slice(&self.beta);
        h.write_f64(self.eta);
        h.finish()
    }
}
