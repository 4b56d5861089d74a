//! The ε-prediction network and test denoisers.

pub mod checkpoint;
mod doubles;
pub(crate) mod layers;
mod params;

pub use doubles::{FixedNoiseDenoiser, OracleDenoiser};
pub use layers::norm_groups;
pub(crate) use params::Init;
pub use params::{Bound, Params};

use crate::autodiff::{Graph, Var};
use crate::diffusion::Denoiser;
use crate::error::{invalid, Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub enabled: bool,
    pub heads: usize,
    pub head_channels: usize,
}

/// Architecture of the conditional U-Net.
///
/// Level `i` runs at `channels[i]` features and spatial size `1/2^i` of the
/// input. The noisy input and the condition are concatenated channelwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub data_channels: usize,
    pub cond_channels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub attention: AttentionSpec,
}

impl DenoiserSpec {
    /// 8/16/32 features, one residual block per level, 2 heads × 8.
    pub fn desk() -> Self {
        DenoiserSpec {
            data_channels: 1,
            cond_channels: 1,
            channels: vec![8, 16, 32],
            blocks_per_level: 1,
            time_embed_dim: 32,
            attention: AttentionSpec {
                enabled: true,
                heads: 2,
                head_channels: 8,
            },
        }
    }

    /// Smallest three-level network; used where many full trainings run.
    pub fn tiny() -> Self {
        DenoiserSpec {
            channels: vec![4, 8, 16],
            time_embed_dim: 16,
            attention: AttentionSpec {
                enabled: true,
                heads: 2,
                head_channels: 4,
            },
            ..Self::desk()
        }
    }

    /// 16/32/64 features, two residual blocks per level, 8 heads × 64.
    pub fn full_scale() -> Self {
        DenoiserSpec {
            channels: vec![16, 32, 64],
            blocks_per_level: 2,
            time_embed_dim: 64,
            attention: AttentionSpec {
                enabled: true,
                heads: 8,
                head_channels: 64,
            },
            ..Self::desk()
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Every spatial axis must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_channels == 0 || self.cond_channels == 0 {
            return Err(Error::Config(
                "data and condition channels must be positive".into(),
            ));
        }
        if self.channels.is_empty() || self.channels[0] == 0 {
            return Err(Error::Config(
                "channel list must be non-empty and positive".into(),
            ));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "channel list {:?} must be strictly increasing",
                self.channels
            )));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("blocks_per_level must be at least 1".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        let a = &self.attention;
        if a.enabled && (a.heads == 0 || a.head_channels == 0) {
            return Err(Error::Config(
                "attention heads and head_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Checks `[n, c, d, h, w]` input shapes against the spec.
    pub fn check_input(&self, x_t: &[usize], cond: &[usize]) -> Result<()> {
        if x_t.len() != 5 || x_t[1] != self.data_channels {
            return Err(Error::Shape {
                op: "predict_noise input",
                lhs: x_t.to_vec(),
                rhs: vec![x_t.first().copied().unwrap_or(1), self.data_channels],
            });
        }
        if cond.len() != 5
            || cond[0] != x_t[0]
            || cond[1] != self.cond_channels
            || cond[2..] != x_t[2..]
        {
            return Err(Error::Shape {
                op: "predict_noise condition",
                lhs: x_t.to_vec(),
                rhs: cond.to_vec(),
            });
        }
        let d = self.divisor();
        if x_t[2..].iter().any(|n| n % d != 0) {
            return Err(invalid(format!(
                "spatial dims {:?} must be divisible by {d} for {} levels",
                &x_t[2..],
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Sinusoidal encoding: `dim/2` sines followed by `dim/2` cosines of
/// `t / 10000^(2i/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!(
            "embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let angles: Vec<f64> = (0..half)
        .map(|i| t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64))
        .collect();
    Ok(angles
        .iter()
        .map(|a| a.sin())
        .chain(angles.iter().map(|a| a.cos()))
        .collect())
}

/// Deterministic initialization; the output convolution starts at zero so
/// the untrained network predicts ε̃ = 0.
pub fn init_params(spec: &DenoiserSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0);
    let mut init = Init::new(&mut rng);
    let e = spec.time_embed_dim;
    let ch = &spec.channels;
    init.linear("time.lin1", e, e);
    init.linear("time.lin2", e, e);
    init.conv("in.conv", ch[0], spec.data_channels + spec.cond_channels, 3);
    for (i, &c) in ch.iter().enumerate() {
        if i > 0 {
            init.conv(&format!("down{i}.conv"), c, ch[i - 1], 3);
        }
        for j in 0..spec.blocks_per_level {
            layers::init_resblock(&mut init, &format!("down{i}.res{j}"), c, c, Some(e));
        }
    }
    let deep = *ch.last().unwrap();
    layers::init_resblock(&mut init, "mid.res0", deep, deep, Some(e));
    if spec.attention.enabled {
        let a = &spec.attention;
        layers::init_attention(&mut init, "mid.attn", deep, a.heads, a.head_channels);
    }
    for (i, &c) in ch.iter().enumerate().rev() {
        for j in 0..spec.blocks_per_level {
            let c_in = if j == 0 { 2 * c } else { c };
            layers::init_resblock(&mut init, &format!("up{i}.res{j}"), c_in, c, Some(e));
        }
        if i > 0 {
            init.conv_transpose(&format!("up{i}.upconv"), c, ch[i - 1], 2, 2);
        }
    }
    init.norm("out.norm", ch[0]);
    init.conv_zero("out.conv", spec.data_channels, ch[0], 3);
    Ok(init.params)
}

/// Network forward pass inside `g`; `t` holds one timestep per batch item.
pub fn forward(
    spec: &DenoiserSpec,
    g: &mut Graph,
    p: &Bound,
    x_t: Var,
    cond: Var,
    t: &[usize],
) -> Result<Var> {
    let xs = g.value(x_t).shape().to_vec();
    spec.check_input(&xs, g.value(cond).shape())?;
    if t.len() != xs[0] {
        return Err(invalid(format!(
            "{} timesteps for batch of {}",
            t.len(),
            xs[0]
        )));
    }
    let e = spec.time_embed_dim;
    let mut emb = Vec::with_capacity(t.len() * e);
    for &ti in t {
        emb.extend(timestep_embedding(ti, e)?);
    }
    let emb = g.constant(Tensor::new(vec![t.len(), e], emb)?);
    let h = layers::linear(g, p, "time.lin1", emb)?;
    let h = g.silu(h)?;
    let temb = layers::linear(g, p, "time.lin2", h)?;
    let temb = Some(g.silu(temb)?);

    let input = g.concat(&[x_t, cond])?;
    let mut h = layers::conv3(g, p, "in.conv", input)?;
    let mut skips = Vec::with_capacity(spec.levels());
    for i in 0..spec.levels() {
        if i > 0 {
            h = layers::conv(g, p, &format!("down{i}.conv"), h, 2, 1)?;
        }
        for j in 0..spec.blocks_per_level {
            h = layers::resblock(g, p, &format!("down{i}.res{j}"), h, temb)?;
        }
        skips.push(h);
    }
    h = layers::resblock(g, p, "mid.res0", h, temb)?;
    if spec.attention.enabled {
        let a = &spec.attention;
        h = layers::attention(g, p, "mid.attn", h, a.heads, a.head_channels)?;
    }
    for i in (0..spec.levels()).rev() {
        h = g.concat(&[h, skips[i]])?;
        for j in 0..spec.blocks_per_level {
            h = layers::resblock(g, p, &format!("up{i}.res{j}"), h, temb)?;
        }
        if i > 0 {
            h = layers::conv_transpose(g, p, &format!("up{i}.upconv"), h, 2)?;
        }
    }
    let h = layers::norm(g, p, "out.norm", h)?;
    let h = g.silu(h)?;
    layers::conv3(g, p, "out.conv", h)
}

/// Conditional U-Net noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub spec: DenoiserSpec,
    pub params: Params,
}

impl UNet {
    pub fn new(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(UNet { spec, params })
    }

    pub fn from_params(spec: DenoiserSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let expected = init_params(&spec, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape {
                        op: "parameter",
                        lhs: p.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(invalid(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(UNet { spec, params })
    }
}

impl Denoiser for UNet {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = g.constant(condition.clone());
        let n = x_t.shape().first().copied().unwrap_or(1);
        let out = forward(&self.spec, &mut g, &p, x, c, &vec![t; n])?;
        Ok(g.value(out).clone())
    }

    fn sample_shape(&self, condition: &Tensor) -> Vec<usize> {
        let mut s = condition.shape().to_vec();
        if s.len() == 5 {
            s[1] = self.spec.data_channels;
        }
        s
    }
}
