//! Variance schedule and the coefficients derived from it.
//!
//! Timesteps are 1-based: `t = 1..=T`, with the convention that the
//! cumulative product at `t = 0` is 1.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Coefficients of the posterior mean `c0 · x0 + ct · x_t` and its variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub c0: f64,
    pub ct: f64,
    pub var: f64,
}

impl NoiseSchedule {
    /// β linearly interpolated over `T - 1` intervals, endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(NoiseSchedule {
            steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    /// 1000 steps, β from 0.0005 to 0.0195.
    pub fn full_scale() -> Self {
        Self::linear(1000, 0.0005, 0.0195).expect("valid constants")
    }

    /// 200 steps with the full-scale β range stretched by 1000/200, so the
    /// signal is destroyed to the same degree at `t = T`.
    pub fn desk() -> Self {
        Self::linear(200, 0.0025, 0.0975).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    /// Cumulative product for `t` in `0..=T`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.check(t)?])
    }

    /// `(sqrt(ᾱ_t), sqrt(1 - ᾱ_t))`.
    pub fn signal_noise_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar[self.check(t)?];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        let i = self.check(t)?;
        let ab = self.alpha_bar[i];
        let ab_prev = if i == 0 { 1.0 } else { self.alpha_bar[i - 1] };
        let a = self.alpha[i];
        Ok(PosteriorCoeffs {
            c0: ab_prev.sqrt() * (1.0 - a) / (1.0 - ab),
            ct: a.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            var: self.posterior_var[i],
        })
    }
}
