//! Forward corruption, clean-image estimation and ancestral sampling.
//!
//! The tensor-level functions are shape-agnostic, so the same code drives
//! both image-space and latent-space diffusion. Volume-level wrappers apply
//! the range-tag conventions of [`Volume3`].

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::rng::{normal_tensor, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::volume::{NormTarget, RangeTag, Volume3};

/// Anything that predicts the noise in `x_t` given a condition and timestep.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor>;

    /// Shape of the sampled quantity for a given condition. Defaults to the
    /// condition's own shape.
    fn sample_shape(&self, condition: &Tensor) -> Vec<usize> {
        condition.shape().to_vec()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_noise(x_t, condition, t)
    }

    fn sample_shape(&self, condition: &Tensor) -> Vec<usize> {
        (**self).sample_shape(condition)
    }
}

/// Standard deviation used for the fresh noise of each reverse step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaPolicy {
    /// square root of the posterior variance
    Posterior,
    /// square root of β_t
    Beta,
    /// deterministic reverse chain
    Zero,
}

impl SigmaPolicy {
    pub fn sigma(self, sched: &NoiseSchedule, t: usize) -> Result<f64> {
        Ok(match self {
            SigmaPolicy::Posterior => sched.posterior_var(t)?.sqrt(),
            SigmaPolicy::Beta => sched.beta(t)?.sqrt(),
            SigmaPolicy::Zero => 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub mc_repeats: usize,
    pub seed: u64,
    pub clamp_x0: bool,
    /// force z = 0 at t = 1
    pub final_noise_zero: bool,
    pub sigma: SigmaPolicy,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            mc_repeats: 1,
            seed: 0,
            clamp_x0: false,
            final_noise_zero: true,
            sigma: SigmaPolicy::Posterior,
        }
    }
}

/// `sqrt(ᾱ_t) · x0 + sqrt(1 - ᾱ_t) · eps`.
pub fn corrupt(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = sched.signal_noise_coeffs(t)?;
    x0.expect_same_shape(eps, "corrupt")?;
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `(x_t - sqrt(1 - ᾱ_t) · eps_hat) / sqrt(ᾱ_t)`, optionally clipped to [-1, 1].
pub fn estimate_x0(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    clamp: bool,
) -> Result<Tensor> {
    let (a, b) = sched.signal_noise_coeffs(t)?;
    x_t.expect_same_shape(eps_hat, "estimate_x0")?;
    x_t.zip_map(eps_hat, |x, e| {
        let v = (x - b * e) / a;
        if clamp {
            v.clamp(-1.0, 1.0)
        } else {
            v
        }
    })
}

/// Mean of `q(x_{t-1} | x_t, x0_hat)`.
pub fn posterior_mean(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let p = sched.posterior_coeffs(t)?;
    x_t.expect_same_shape(x0_hat, "posterior_mean")?;
    x0_hat.zip_map(x_t, |x0, xt| p.c0 * x0 + p.ct * xt)
}

/// One reverse step written directly in terms of the predicted noise:
/// `(x_t - (1 - α_t) / sqrt(1 - ᾱ_t) · eps_hat) / sqrt(α_t) + σ_t · z`.
///
/// `z = None` means z = 0.
pub fn ancestral_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: Option<&Tensor>,
    sched: &NoiseSchedule,
    sigma: SigmaPolicy,
) -> Result<Tensor> {
    x_t.expect_same_shape(eps_hat, "ancestral_step")?;
    let alpha = sched.alpha(t)?;
    let (_, noise) = sched.signal_noise_coeffs(t)?;
    let k = (1.0 - alpha) / noise;
    let inv = 1.0 / alpha.sqrt();
    let mut out = x_t.zip_map(eps_hat, |x, e| inv * (x - k * e))?;
    if let Some(z) = z {
        out.expect_same_shape(z, "ancestral_step")?;
        let s = sigma.sigma(sched, t)?;
        for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += s * zv;
        }
    }
    Ok(out)
}

fn with_timestep<T>(t: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Timestep {
        t,
        source: Box::new(e),
    })
}

/// Full reverse chain `t = T..1` from pure noise, using the random stream
/// `stream` of `cfg.seed`.
pub fn reverse_sample_stream(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
    stream: u64,
) -> Result<Tensor> {
    let mut rng = stream_rng(cfg.seed, stream);
    let shape = denoiser.sample_shape(condition);
    let x_start = normal_tensor(&mut rng, &shape);
    reverse_chain(denoiser, x_start, condition, sched, cfg, &mut rng)
}

/// Runs `t = T..1` from a given `x_T`, drawing the fresh noise of each
/// step from `rng`.
pub fn reverse_chain(
    denoiser: &dyn Denoiser,
    x_start: Tensor,
    condition: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let shape = x_start.shape().to_vec();
    let mut x = x_start;
    for t in (1..=sched.steps()).rev() {
        let eps_hat = with_timestep(t, denoiser.predict_noise(&x, condition, t))?;
        if eps_hat.shape() != shape.as_slice() {
            return Err(Error::Timestep {
                t,
                source: Box::new(Error::Shape {
                    op: "denoiser output",
                    lhs: eps_hat.shape().to_vec(),
                    rhs: shape.clone(),
                }),
            });
        }
        // z is drawn at every step so the stream layout does not depend on the policy
        let z = normal_tensor(rng, &shape);
        let z = if (t == 1 && cfg.final_noise_zero) || cfg.sigma == SigmaPolicy::Zero {
            None
        } else {
            Some(&z)
        };
        x = if cfg.clamp_x0 {
            let x0 = estimate_x0(&x, &eps_hat, t, sched, true)?;
            let mut mean = posterior_mean(&x, &x0, t, sched)?;
            if let Some(z) = z {
                let s = cfg.sigma.sigma(sched, t)?;
                for (m, zv) in mean.data_mut().iter_mut().zip(z.data()) {
                    *m += s * zv;
                }
            }
            mean
        } else {
            ancestral_step(&x, &eps_hat, t, z, sched, cfg.sigma)?
        };
        if !x.is_finite() {
            return Err(Error::Timestep {
                t,
                source: Box::new(Error::Numeric(
                    "reverse chain produced non-finite values".into(),
                )),
            });
        }
    }
    Ok(x)
}

pub fn reverse_sample(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    reverse_sample_stream(denoiser, condition, sched, cfg, 0)
}

/// The `cfg.mc_repeats` independent reverse samples, repeat `i` on stream `i`.
pub fn mc_repeats(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Vec<Tensor>> {
    if cfg.mc_repeats == 0 {
        return Err(invalid("mc_repeats must be at least 1"));
    }
    (0..cfg.mc_repeats as u64)
        .map(|i| reverse_sample_stream(denoiser, condition, sched, cfg, i))
        .collect()
}

/// Voxelwise arithmetic mean of a non-empty set of equally shaped tensors.
pub fn mean_of(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| invalid("mean of zero samples"))?;
    let mut acc = Tensor::zeros(first.shape());
    for s in samples {
        acc.expect_same_shape(s, "mean_of")?;
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Monte-Carlo sampling: the mean of `cfg.mc_repeats` reverse samples.
pub fn mc_sample(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    if cfg.mc_repeats == 1 {
        return reverse_sample(denoiser, condition, sched, cfg);
    }
    mean_of(&mc_repeats(denoiser, condition, sched, cfg)?)
}

fn require_train(v: &Volume3, what: &str) -> Result<()> {
    if v.range() != RangeTag::Train {
        return Err(invalid(format!(
            "{what} must be train-range, got {:?}",
            v.range()
        )));
    }
    Ok(())
}

fn tag_if_in_range(t: &Tensor, extrema: (f64, f64)) -> Result<Volume3> {
    let tag = if t.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
        RangeTag::Train
    } else {
        RangeTag::Raw
    };
    Volume3::from_tensor(t, tag, extrema)
}

/// Volume form of [`corrupt`]; the noisy result is tagged raw.
pub fn corrupt_volume(
    x0: &Volume3,
    eps: &Volume3,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Volume3> {
    require_train(x0, "corrupt input")?;
    let out = corrupt(&x0.to_tensor(), &eps.to_tensor(), t, sched)?;
    Volume3::from_tensor(&out, RangeTag::Raw, x0.extrema())
}

/// Volume form of [`estimate_x0`]; tagged train when every voxel is in range.
pub fn estimate_x0_volume(
    x_t: &Volume3,
    eps_hat: &Volume3,
    t: usize,
    sched: &NoiseSchedule,
    clamp: bool,
) -> Result<Volume3> {
    let out = estimate_x0(&x_t.to_tensor(), &eps_hat.to_tensor(), t, sched, clamp)?;
    tag_if_in_range(&out, x_t.extrema())
}

/// Monte-Carlo sample for a single-channel condition volume.
///
/// The result is clipped to [-1, 1] and tagged train-range, carrying the
/// condition's stored extrema.
pub fn sample_volume(
    denoiser: &dyn Denoiser,
    condition: &Volume3,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Volume3> {
    require_train(condition, "condition")?;
    let out = mc_sample(denoiser, &condition.to_tensor(), sched, cfg)?;
    let raw = Volume3::from_tensor(&out, RangeTag::Raw, condition.extrema())?;
    Ok(raw.clamp_to(NormTarget::Train))
}
