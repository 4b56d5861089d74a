//! Diffusion in the latent space of a frozen convolutional autoencoder.
//!
//! The autoencoder maps `[n, 1, d, h, w]` volumes to `[n, c, d/8, h/8, w/8]`
//! codes with three stride-2 convolutions and mirrors them with stride-2
//! transposed convolutions. Latent diffusion reuses [`Trainer`] and
//! [`UNet`] unchanged on `(encode(mri), encode(pet))` pairs, so the
//! image-level term of the loss is computed between latent codes.

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Var};
use crate::diffusion::{corrupt, estimate_x0, mc_sample, Denoiser, SampleConfig};
use crate::error::{invalid, Error, Result};
use crate::losses::{graph_image_loss, image_loss};
use crate::model::checkpoint::{Checkpoint, Section};
use crate::model::layers;
use crate::model::{AttentionSpec, Bound, DenoiserSpec, Init, Params, UNet};
use crate::rng::{normal_tensor, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::trainer::{adam_step, AdamState, Sample, TrainConfig};

const LEVELS: usize = 3;
const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoencoderSpec {
    /// width after each of the three downsampling convolutions
    pub channels: [usize; LEVELS],
    pub latent_channels: usize,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            channels: [8, 16, 32],
            latent_channels: 4,
        }
    }
}

impl AutoencoderSpec {
    pub const FACTOR: usize = 1 << LEVELS;

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.latent_channels == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 || input[1] != 1 {
            return Err(Error::Shape {
                op: "encode",
                lhs: input.to_vec(),
                rhs: vec![input.first().copied().unwrap_or(1), 1],
            });
        }
        if input[2..].iter().any(|n| n % Self::FACTOR != 0) {
            return Err(invalid(format!(
                "spatial dims {:?} must be divisible by {}",
                &input[2..],
                Self::FACTOR
            )));
        }
        let mut s = vec![input[0], self.latent_channels];
        s.extend(input[2..].iter().map(|n| n / Self::FACTOR));
        Ok(s)
    }

    /// Denoiser for latent codes: two levels, condition code concatenated.
    pub fn latent_denoiser(&self) -> DenoiserSpec {
        DenoiserSpec {
            data_channels: self.latent_channels,
            cond_channels: self.latent_channels,
            channels: vec![16, 32],
            blocks_per_level: 1,
            time_embed_dim: 16,
            attention: AttentionSpec {
                enabled: true,
                heads: 2,
                head_channels: 4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub spec: AutoencoderSpec,
    pub params: Params,
}

impl Autoencoder {
    /// Decoder output convolution starts at zero.
    pub fn new(spec: AutoencoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, 0);
        let mut init = Init::new(&mut rng);
        let c = spec.channels;
        init.conv("enc.in", c[0], 1, 3);
        for i in 0..LEVELS {
            let c_in = if i == 0 { c[0] } else { c[i - 1] };
            init.conv(&format!("enc.down{i}"), c[i], c_in, 3);
        }
        init.conv("enc.out", spec.latent_channels, c[LEVELS - 1], 1);
        init.conv("dec.in", c[LEVELS - 1], spec.latent_channels, 1);
        for i in (0..LEVELS).rev() {
            let c_out = if i == 0 { c[0] } else { c[i - 1] };
            init.conv_transpose(&format!("dec.up{i}"), c[i], c_out, 2, 2);
        }
        init.conv_zero("dec.out", 1, c[0], 3);
        Ok(Autoencoder {
            spec,
            params: init.params,
        })
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.spec.latent_shape(g.value(x).shape())?;
        let h = layers::conv3(g, p, "enc.in", x)?;
        let mut h = g.silu(h)?;
        for i in 0..LEVELS {
            h = layers::conv(g, p, &format!("enc.down{i}"), h, 2, 1)?;
            h = g.silu(h)?;
        }
        layers::conv(g, p, "enc.out", h, 1, 0)
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let s = g.value(z).shape();
        if s.len() != 5 || s[1] != self.spec.latent_channels {
            return Err(Error::Shape {
                op: "decode",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(1), self.spec.latent_channels],
            });
        }
        let h = layers::conv(g, p, "dec.in", z, 1, 0)?;
        let mut h = g.silu(h)?;
        for i in (0..LEVELS).rev() {
            h = layers::conv_transpose(g, p, &format!("dec.up{i}"), h, 2)?;
            h = g.silu(h)?;
        }
        layers::conv3(g, p, "dec.out", h)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &p, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(x).clone())
    }

    /// Mean ℓ1 reconstruction error over a set of volumes.
    pub fn reconstruction_l1(&self, data: &[Tensor]) -> Result<f64> {
        let mut total = 0.0;
        for x in data {
            total += image_loss(x, &self.decode(&self.encode(x)?)?)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(Section::Autoencoder);
        let ch = self.spec.channels;
        c.set("ae.channels", format!("{},{},{}", ch[0], ch[1], ch[2]));
        c.set("ae.latent_channels", self.spec.latent_channels);
        c.push_params("", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.section != Section::Autoencoder {
            return Err(invalid("checkpoint does not hold an autoencoder"));
        }
        let ch: Vec<usize> = c
            .require("ae.channels")?
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("ae.channels: {e}")))?;
        let channels: [usize; LEVELS] = ch
            .try_into()
            .map_err(|_| Error::Config("ae.channels needs three widths".into()))?;
        let spec = AutoencoderSpec {
            channels,
            latent_channels: c.parse("ae.latent_channels")?,
        };
        let fresh = Autoencoder::new(spec.clone(), 0)?;
        let params = c.params("")?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(invalid(format!(
                        "autoencoder parameter {name} missing or misshaped"
                    )))
                }
            }
        }
        Ok(Autoencoder { spec, params })
    }
}

/// ℓ1 reconstruction training; returns the per-step batch loss.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    data: &[Tensor],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("autoencoder training set is empty"));
    }
    let spe = data.len().div_ceil(cfg.batch_size);
    let total = cfg
        .max_steps
        .map_or(cfg.epochs * spe, |m| m.min(cfg.epochs * spe));
    let mut adam = AdamState::new(&ae.params);
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        let batch = &order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(data.len())];
        let mut acc: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        for &i in batch {
            let mut g = Graph::new();
            let p = ae.params.bind(&mut g, true);
            let x = g.constant(data[i].clone());
            let z = ae.encode_graph(&mut g, &p, x)?;
            let y = ae.decode_graph(&mut g, &p, z)?;
            let l = graph_image_loss(&mut g, x, y)?;
            loss += g.value(l).data()[0];
            let grads = g.backward(l)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(v)).collect();
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (a, g) in a.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<Tensor> = acc
            .unwrap()
            .into_iter()
            .map(|g| g.map(|v| v * scale))
            .collect();
        adam_step(&mut ae.params, &grads, &mut adam, &cfg.adam)
            .map_err(|e| Error::Numeric(format!("autoencoder step {step}: {e}")))?;
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "autoencoder step {step}: non-finite loss"
            )));
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// `(encode(condition), encode(target))` pairs for latent diffusion.
pub fn latent_samples(ae: &Autoencoder, samples: &[Sample]) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let c = s.condition.shape();
            if c.len() != 5 || c[1] != 1 {
                return Err(invalid("latent diffusion needs single-channel conditions"));
            }
            Sample::new(ae.encode(&s.condition)?, ae.encode(&s.target)?)
        })
        .collect()
}

/// Samples a latent code from the encoded condition and decodes it.
pub fn latent_sample(
    denoiser: &UNet,
    ae: &Autoencoder,
    condition: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    let zc = ae.encode(condition)?;
    let z = mc_sample(denoiser, &zc, sched, cfg)?;
    ae.decode(&z)
}

/// Held-out quality of the one-shot latent estimate Z̃0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentEval {
    /// mean |Z0 − Z̃0|
    pub latent_l1: f64,
    /// mean |X0 − decode(Z̃0)| in train range
    pub image_l1: f64,
}

/// `latent[i]` must be the encoding of `images[i]`; each pair is corrupted
/// at `draws` fixed draws from `stream_rng(eval_seed, i)`.
pub fn evaluate_latent(
    denoiser: &dyn Denoiser,
    ae: &Autoencoder,
    latent: &[Sample],
    images: &[Sample],
    sched: &NoiseSchedule,
    eval_seed: u64,
    draws: usize,
) -> Result<LatentEval> {
    if latent.len() != images.len() || latent.is_empty() {
        return Err(invalid(
            "latent and image evaluation sets must be non-empty and aligned",
        ));
    }
    let (mut zl, mut xl) = (0.0, 0.0);
    for (i, (z, x)) in latent.iter().zip(images).enumerate() {
        let mut rng = stream_rng(eval_seed, i as u64);
        for _ in 0..draws {
            use rand::Rng;
            let t = rng.random_range(1..=sched.steps());
            let eps = normal_tensor(&mut rng, z.target.shape());
            let z_t = corrupt(&z.target, &eps, t, sched)?;
            let eps_hat = denoiser.predict_noise(&z_t, &z.condition, t)?;
            let z0_hat = estimate_x0(&z_t, &eps_hat, t, sched, false)?;
            zl += image_loss(&z.target, &z0_hat)?;
            xl += image_loss(&x.target, &ae.decode(&z0_hat)?)?;
        }
    }
    let n = (latent.len() * draws) as f64;
    Ok(LatentEval {
        latent_l1: zl / n,
        image_l1: xl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OracleDenoiser;
    use crate::rng::normal_tensor;

    #[test]
    fn shapes_and_zero_head() {
        let ae = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        let x = normal_tensor(&mut stream_rng(1, 0), &[1, 1, 16, 16, 16]);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[1, 4, 2, 2, 2]);
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(ae.encode(&Tensor::zeros(&[1, 1, 12, 16, 16])).is_err());
    }

    #[test]
    fn oracle_recovers_latent() {
        let sched = NoiseSchedule::desk();
        let z0 = normal_tensor(&mut stream_rng(2, 0), &[1, 4, 2, 2, 2]);
        let eps = normal_tensor(&mut stream_rng(2, 1), &[1, 4, 2, 2, 2]);
        let d = OracleDenoiser::new(z0.clone(), sched.clone());
        let zt = corrupt(&z0, &eps, 120, &sched).unwrap();
        let e = d.predict_noise(&zt, &zt, 120).unwrap();
        assert!(
            estimate_x0(&zt, &e, 120, &sched, false)
                .unwrap()
                .max_abs_diff(&z0)
                < 1e-10
        );
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let data: Vec<Tensor> = (0..4)
            .map(|i| normal_tensor(&mut stream_rng(3, i), &[1, 1, 8, 8, 8]).map(|v| 0.3 * v.tanh()))
            .collect();
        let cfg = TrainConfig {
            epochs: 10,
            adam: crate::trainer::AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut a = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        let la = train_autoencoder(&mut a, &data, &cfg).unwrap();
        let mut b = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        assert_eq!(train_autoencoder(&mut b, &data, &cfg).unwrap(), la);
        assert!(la.last().unwrap() < &la[0]);
        let mut zero = TrainConfig { epochs: 0, ..cfg };
        zero.max_steps = None;
        let mut c = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        assert!(train_autoencoder(&mut c, &data, &zero).unwrap().is_empty());
        assert_eq!(c, Autoencoder::new(AutoencoderSpec::default(), 0).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ae = Autoencoder::new(AutoencoderSpec::default(), 5).unwrap();
        let c = crate::model::checkpoint::decode_checkpoint(
            &crate::model::checkpoint::encode_checkpoint(&ae.to_checkpoint()),
        )
        .unwrap();
        assert_eq!(Autoencoder::from_checkpoint(&c).unwrap(), ae);
    }
}
