//! Building blocks shared by the noise predictor and the autoencoder.

use super::params::{Bound, Init};
use crate::autodiff::{Graph, Var};
use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;

/// Group count for a normalization over `channels`: gcd(8, channels),
/// which is min(8, channels) for every power-of-two width.
pub fn norm_groups(channels: usize) -> usize {
    let (mut a, mut b) = (8, channels);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub(crate) fn channels(g: &Graph, x: Var) -> usize {
    g.value(x).shape()[1]
}

pub(crate) fn conv(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    g.conv3d(x, w, Some(b), stride, pad)
}

/// Same-size 3³ convolution.
pub(crate) fn conv3(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    conv(g, p, prefix, x, 1, 1)
}

pub(crate) fn conv_transpose(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    g.conv_transpose3d(x, w, Some(b), stride, 0)
}

pub(crate) fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    let c = channels(g, x);
    g.group_norm(x, gamma, beta, norm_groups(c), NORM_EPS)
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn init_resblock(
    init: &mut Init,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    temb: Option<usize>,
) {
    init.norm(&format!("{prefix}.norm1"), c_in);
    init.conv(&format!("{prefix}.conv1"), c_out, c_in, 3);
    if let Some(dim) = temb {
        init.linear(&format!("{prefix}.temb"), c_out, dim);
    }
    init.norm(&format!("{prefix}.norm2"), c_out);
    init.conv(&format!("{prefix}.conv2"), c_out, c_out, 3);
    if c_in != c_out {
        init.conv(&format!("{prefix}.skip"), c_out, c_in, 1);
    }
}

/// Pre-activation residual block with an optional timestep projection
/// added per channel after the first convolution. Channel changes go
/// through a 1³ convolution on the shortcut.
pub(crate) fn resblock(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    temb: Option<Var>,
) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.norm1"), x)?;
    let h = g.silu(h)?;
    let mut h = conv3(g, p, &format!("{prefix}.conv1"), h)?;
    if let Some(temb) = temb {
        let proj = linear(g, p, &format!("{prefix}.temb"), temb)?;
        h = g.add_channel(h, proj)?;
    }
    let h = norm(g, p, &format!("{prefix}.norm2"), h)?;
    let h = g.silu(h)?;
    let h = conv3(g, p, &format!("{prefix}.conv2"), h)?;
    let skip_name = format!("{prefix}.skip");
    let shortcut = if p.var(&format!("{skip_name}.w")).is_ok() {
        conv(g, p, &skip_name, x, 1, 0)?
    } else {
        x
    };
    g.add(h, shortcut)
}

pub(crate) fn init_attention(
    init: &mut Init,
    prefix: &str,
    c: usize,
    heads: usize,
    head_channels: usize,
) {
    let inner = heads * head_channels;
    init.norm(&format!("{prefix}.norm"), c);
    for proj in ["q", "k", "v"] {
        init.conv(&format!("{prefix}.{proj}"), inner, c, 1);
    }
    init.conv(&format!("{prefix}.out"), c, inner, 1);
}

/// Multi-head self-attention over flattened voxels, with a residual add.
pub(crate) fn attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    head_channels: usize,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (n, spatial) = (shape[0], shape[2] * shape[3] * shape[4]);
    let h = norm(g, p, &format!("{prefix}.norm"), x)?;
    let split = |g: &mut Graph, v: Var| g.reshape(v, &[n * heads, head_channels, spatial]);
    let q = conv(g, p, &format!("{prefix}.q"), h, 1, 0)?;
    let q = split(g, q)?;
    let k = conv(g, p, &format!("{prefix}.k"), h, 1, 0)?;
    let k = split(g, k)?;
    let v = conv(g, p, &format!("{prefix}.v"), h, 1, 0)?;
    let v = split(g, v)?;
    // scores[b, i, j] = <q_i, k_j> / sqrt(head_channels)
    let qt = g.transpose(q)?;
    let scores = g.batch_matmul(qt, k)?;
    let scores = g.affine(scores, 1.0 / (head_channels as f64).sqrt(), 0.0)?;
    let weights = g.softmax(scores)?;
    // out[b, c, i] = sum_j v[b, c, j] · weights[b, i, j]
    let wt = g.transpose(weights)?;
    let out = g.batch_matmul(v, wt)?;
    let out = g.reshape(
        out,
        &[n, heads * head_channels, shape[2], shape[3], shape[4]],
    )?;
    let out = conv(g, p, &format!("{prefix}.out"), out, 1, 0)?;
    g.add(x, out)
}
