use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Emits a stored noise tensor for every input.
#[derive(Clone, Debug)]
pub struct FixedNoiseDenoiser {
    pub eps: Tensor,
}

impl FixedNoiseDenoiser {
    pub fn new(eps: Tensor) -> Self {
        FixedNoiseDenoiser { eps }
    }
}

impl Denoiser for FixedNoiseDenoiser {
    fn predict_noise(&self, x_t: &Tensor, _condition: &Tensor, _t: usize) -> Result<Tensor> {
        x_t.expect_same_shape(&self.eps, "fixed-noise denoiser")?;
        Ok(self.eps.clone())
    }
}

/// Knows the clean target and returns the exact noise present in `x_t`:
/// `(x_t − √ᾱ_t·x0) / √(1−ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Tensor,
    pub sched: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(x0: Tensor, sched: NoiseSchedule) -> Self {
        OracleDenoiser { x0, sched }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, x_t: &Tensor, _condition: &Tensor, t: usize) -> Result<Tensor> {
        let (a, b) = self.sched.signal_noise_coeffs(t)?;
        if b == 0.0 {
            return Err(Error::Numeric(format!("no noise at t={t}")));
        }
        x_t.zip_map(&self.x0, |x, x0| (x - a * x0) / b)
    }

    fn sample_shape(&self, _condition: &Tensor) -> Vec<usize> {
        self.x0.shape().to_vec()
    }
}
