use super::conv::{conv_out_len, conv_transpose_out_len, ConvGeom};
use super::Op;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

fn mismatch(op: &Op, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn arity(op: &Op, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(invalid(format!(
            "{}: expected {:?} inputs, got {}",
            op.name(),
            allowed,
            inputs.len()
        )))
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Geometry of a conv (or transposed conv) given input and weight shapes.
fn conv_geom(
    op: &Op,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(ConvGeom, Vec<usize>)> {
    let (stride, pad, transposed) = match *op {
        Op::Conv3d { stride, padding } => (stride, padding, false),
        Op::ConvTranspose3d { stride, padding } => (stride, padding, true),
        _ => unreachable!(),
    };
    if stride == 0 {
        return Err(invalid(format!("{}: stride must be positive", op.name())));
    }
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(mismatch(op, xs, ws));
    }
    let kernel = [ws[2], ws[3], ws[4]];
    let (c_in, c_out) = if transposed {
        (ws[0], ws[1])
    } else {
        (ws[1], ws[0])
    };
    if xs[1] != c_in {
        return Err(mismatch(op, xs, ws));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(mismatch(op, ws, b.shape()));
        }
    }
    let mut out_sp = [0usize; 3];
    for a in 0..3 {
        let len = if transposed {
            conv_transpose_out_len(xs[2 + a], kernel[a], stride, pad)
        } else {
            conv_out_len(xs[2 + a], kernel[a], stride, pad)
        };
        out_sp[a] = len.ok_or_else(|| mismatch(op, xs, ws))?;
    }
    let in_sp = [xs[2], xs[3], xs[4]];
    let geom = if transposed {
        ConvGeom {
            batch: xs[0],
            c_big: c_out,
            big: out_sp,
            c_small: c_in,
            small: in_sp,
            kernel,
            stride,
            pad,
        }
    } else {
        ConvGeom {
            batch: xs[0],
            c_big: c_in,
            big: in_sp,
            c_small: c_out,
            small: out_sp,
            kernel,
            stride,
            pad,
        }
    };
    let out_shape = vec![xs[0], c_out, out_sp[0], out_sp[1], out_sp[2]];
    Ok((geom, out_shape))
}

fn add_bias(out: &mut [f64], bias: &[f64], batch: usize, inner: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (ci, b) in bias.iter().enumerate() {
            let base = (n * c + ci) * inner;
            for v in &mut out[base..base + inner] {
                *v += b;
            }
        }
    }
}

fn bias_grad(gout: &[f64], batch: usize, c: usize, inner: usize) -> Tensor {
    let mut g = vec![0.0; c];
    for n in 0..batch {
        for (ci, gc) in g.iter_mut().enumerate() {
            let base = (n * c + ci) * inner;
            *gc += gout[base..base + inner].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], g).expect("bias shape")
}

fn group_norm_check(
    op: &Op,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(mismatch(op, xs, gamma.shape()));
    }
    let c = xs[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch(op, xs, gamma.shape()));
    }
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!(
            "group_norm: {groups} groups do not divide {c} channels"
        )));
    }
    let inner: usize = xs[2..].iter().product();
    Ok((xs[0], c, inner))
}

/// Per-group mean and reciprocal standard deviation.
fn group_stats(
    x: &[f64],
    batch: usize,
    c: usize,
    inner: usize,
    groups: usize,
    eps: f64,
) -> Vec<(f64, f64)> {
    let per = c / groups * inner;
    (0..batch * groups)
        .map(|bg| {
            let chunk = &x[bg * per..(bg + 1) * per];
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn matmul_dims(op: &Op, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(mismatch(op, sa, sb));
    }
    Ok((sa[0], sa[1], sa[2], sb[2]))
}

/// `c[b] (+)= op(a[b]) · op(bm[b])` for row-major `[B, *, *]` buffers.
#[allow(clippy::too_many_arguments)]
fn bmm(
    a: &[f64],
    bm: &[f64],
    out: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for b in 0..batch {
        let a = &a[b * m * k..(b + 1) * m * k];
        let bm = &bm[b * k * n..(b + 1) * k * n];
        let c = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                if trans_b {
                    for j in 0..n {
                        c[i * n + j] += av * bm[j * k + p];
                    }
                } else {
                    let row = &bm[p * n..(p + 1) * n];
                    for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch: usize = shape[..r - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = data[base + i * cols + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(r - 2, r - 1);
    (out, s)
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(super) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!(),
        Op::Conv3d { .. } => {
            arity(op, inputs, &[2, 3])?;
            let (geom, out_shape) = conv_geom(op, inputs[0], inputs[1], inputs.get(2).copied())?;
            let mut out = vec![0.0; out_shape.iter().product()];
            geom.gather(inputs[0].data(), inputs[1].data(), &mut out);
            if let Some(b) = inputs.get(2) {
                add_bias(&mut out, b.data(), geom.batch, geom.small.iter().product());
            }
            Tensor::new(out_shape, out)
        }
        Op::ConvTranspose3d { .. } => {
            arity(op, inputs, &[2, 3])?;
            let (geom, out_shape) = conv_geom(op, inputs[0], inputs[1], inputs.get(2).copied())?;
            let mut out = vec![0.0; out_shape.iter().product()];
            geom.scatter(inputs[0].data(), inputs[1].data(), &mut out);
            if let Some(b) = inputs.get(2) {
                add_bias(&mut out, b.data(), geom.batch, geom.big.iter().product());
            }
            Tensor::new(out_shape, out)
        }
        Op::Linear => {
            arity(op, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let xs = x.shape();
            let ws = w.shape();
            if ws.len() != 2 || xs.last() != Some(&ws[1]) {
                return Err(mismatch(op, xs, ws));
            }
            let (out_f, in_f) = (ws[0], ws[1]);
            if let Some(b) = inputs.get(2) {
                if b.shape() != [out_f] {
                    return Err(mismatch(op, ws, b.shape()));
                }
            }
            let rows = x.numel() / in_f;
            let mut out = vec![0.0; rows * out_f];
            // out = x · wᵀ
            bmm(
                x.data(),
                w.data(),
                &mut out,
                1,
                rows,
                in_f,
                out_f,
                false,
                true,
            );
            if let Some(b) = inputs.get(2) {
                for row in out.chunks_mut(out_f) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = out_f;
            Tensor::new(shape, out)
        }
        Op::GroupNorm { groups, eps } => {
            arity(op, inputs, &[3])?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (batch, c, inner) = group_norm_check(op, x, gamma, beta, *groups)?;
            let stats = group_stats(x.data(), batch, c, inner, *groups, *eps);
            let cpg = c / groups;
            let mut out = vec![0.0; x.numel()];
            for n in 0..batch {
                for ch in 0..c {
                    let (mean, rstd) = stats[n * groups + ch / cpg];
                    let base = (n * c + ch) * inner;
                    let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
                    for i in base..base + inner {
                        out[i] = gm * (x.data()[i] - mean) * rstd + bt;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::Silu => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(silu))
        }
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, inputs, &[2])?;
            same_shape(op, inputs[0], inputs[1])?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |a, b| a + b,
                Op::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            inputs[0].zip_map(inputs[1], f)
        }
        Op::AddChannel => {
            arity(op, inputs, &[2])?;
            let (x, s) = (inputs[0], inputs[1]);
            let xs = x.shape();
            if xs.len() < 2 || s.shape() != [xs[0], xs[1]] {
                return Err(mismatch(op, xs, s.shape()));
            }
            let inner: usize = xs[2..].iter().product();
            let mut out = x.data().to_vec();
            for (nc, shift) in s.data().iter().enumerate() {
                for v in &mut out[nc * inner..(nc + 1) * inner] {
                    *v += shift;
                }
            }
            Tensor::new(xs.to_vec(), out)
        }
        Op::Affine { scale, shift } => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(|v| scale * v + shift))
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(invalid("concat: no inputs"));
            }
            let first = inputs[0].shape();
            if first.len() < 2 {
                return Err(mismatch(op, first, first));
            }
            let mut channels = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                    return Err(mismatch(op, first, s));
                }
                channels += s[1];
            }
            let inner: usize = first[2..].iter().product();
            let mut out = Vec::with_capacity(first[0] * channels * inner);
            for n in 0..first[0] {
                for t in inputs {
                    let block = t.shape()[1] * inner;
                    out.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
                }
            }
            let mut shape = first.to_vec();
            shape[1] = channels;
            Tensor::new(shape, out)
        }
        Op::Softmax => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let last = *x.shape().last().unwrap();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(last) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::BatchMatmul => {
            arity(op, inputs, &[2])?;
            let (b, m, k, n) = matmul_dims(op, inputs[0], inputs[1])?;
            let mut out = vec![0.0; b * m * n];
            bmm(
                inputs[0].data(),
                inputs[1].data(),
                &mut out,
                b,
                m,
                k,
                n,
                false,
                false,
            );
            Tensor::new(vec![b, m, n], out)
        }
        Op::Transpose => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if x.shape().len() < 2 {
                return Err(mismatch(op, x.shape(), x.shape()));
            }
            let (data, shape) = transpose_last2(x.data(), x.shape());
            Tensor::new(shape, data)
        }
        Op::Reshape { shape } => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(mismatch(op, x.shape(), shape));
            }
            x.reshape(shape)
        }
        Op::Sum => {
            arity(op, inputs, &[1])?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        Op::Mean => {
            arity(op, inputs, &[1])?;
            Ok(Tensor::scalar(inputs[0].mean()))
        }
        Op::Abs => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(f64::abs))
        }
        Op::Square => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(|v| v * v))
        }
    }
}

/// Vector-Jacobian products for each input; `None` where `needs[i]` is false.
pub(super) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let like =
        |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("same shape");
    let go = gout.data();
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Conv3d { .. } => {
            let (geom, _) = conv_geom(op, inputs[0], inputs[1], inputs.get(2).copied())?;
            let mut res = vec![None; inputs.len()];
            if need(0) {
                let mut gx = vec![0.0; inputs[0].numel()];
                geom.scatter(go, inputs[1].data(), &mut gx);
                res[0] = Some(like(inputs[0], gx));
            }
            if need(1) {
                let mut gw = vec![0.0; inputs[1].numel()];
                geom.weight_grad(go, inputs[0].data(), &mut gw);
                res[1] = Some(like(inputs[1], gw));
            }
            if inputs.len() == 3 && need(2) {
                res[2] = Some(bias_grad(
                    go,
                    geom.batch,
                    geom.c_small,
                    geom.small.iter().product(),
                ));
            }
            res
        }
        Op::ConvTranspose3d { .. } => {
            let (geom, _) = conv_geom(op, inputs[0], inputs[1], inputs.get(2).copied())?;
            let mut res = vec![None; inputs.len()];
            if need(0) {
                let mut gx = vec![0.0; inputs[0].numel()];
                geom.gather(go, inputs[1].data(), &mut gx);
                res[0] = Some(like(inputs[0], gx));
            }
            if need(1) {
                let mut gw = vec![0.0; inputs[1].numel()];
                geom.weight_grad(inputs[0].data(), go, &mut gw);
                res[1] = Some(like(inputs[1], gw));
            }
            if inputs.len() == 3 && need(2) {
                res[2] = Some(bias_grad(
                    go,
                    geom.batch,
                    geom.c_big,
                    geom.big.iter().product(),
                ));
            }
            res
        }
        Op::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
            let rows = x.numel() / in_f;
            let mut res = vec![None; inputs.len()];
            if need(0) {
                let mut gx = vec![0.0; x.numel()];
                bmm(go, w.data(), &mut gx, 1, rows, out_f, in_f, false, false);
                res[0] = Some(like(x, gx));
            }
            if need(1) {
                let mut gw = vec![0.0; w.numel()];
                bmm(go, x.data(), &mut gw, 1, out_f, rows, in_f, true, false);
                res[1] = Some(like(w, gw));
            }
            if inputs.len() == 3 && need(2) {
                let mut gb = vec![0.0; out_f];
                for row in go.chunks(out_f) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                res[2] = Some(like(inputs[2], gb));
            }
            res
        }
        Op::GroupNorm { groups, eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let (batch, c, inner) = group_norm_check(op, x, gamma, inputs[2], *groups)?;
            let stats = group_stats(x.data(), batch, c, inner, *groups, *eps);
            let cpg = c / groups;
            let per = cpg * inner;
            let xd = x.data();
            let gd = gamma.data();
            let mut gx = vec![0.0; x.numel()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for n in 0..batch {
                for g in 0..*groups {
                    let (mean, rstd) = stats[n * groups + g];
                    // mean of dxhat and of dxhat * xhat over the group
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ch in g * cpg..(g + 1) * cpg {
                        let base = (n * c + ch) * inner;
                        for i in base..base + inner {
                            let xhat = (xd[i] - mean) * rstd;
                            let dxhat = go[i] * gd[ch];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                            ggamma[ch] += go[i] * xhat;
                            gbeta[ch] += go[i];
                        }
                    }
                    m1 /= per as f64;
                    m2 /= per as f64;
                    for ch in g * cpg..(g + 1) * cpg {
                        let base = (n * c + ch) * inner;
                        for i in base..base + inner {
                            let xhat = (xd[i] - mean) * rstd;
                            gx[i] = rstd * (go[i] * gd[ch] - m1 - xhat * m2);
                        }
                    }
                }
            }
            vec![
                need(0).then(|| like(x, gx)),
                need(1).then(|| like(gamma, ggamma)),
                need(2).then(|| like(inputs[2], gbeta)),
            ]
        }
        Op::Silu => {
            let x = inputs[0];
            let g = x
                .data()
                .iter()
                .zip(go)
                .map(|(&v, &g)| g * silu_grad(v))
                .collect();
            vec![Some(like(x, g))]
        }
        Op::Add => vec![need(0).then(|| gout.clone()), need(1).then(|| gout.clone())],
        Op::Sub => vec![
            need(0).then(|| gout.clone()),
            need(1).then(|| gout.map(|v| -v)),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                need(0).then(|| gout.zip_map(b, |g, bv| g * bv).expect("shape")),
                need(1).then(|| gout.zip_map(a, |g, av| g * av).expect("shape")),
            ]
        }
        Op::AddChannel => {
            let (x, s) = (inputs[0], inputs[1]);
            let inner: usize = x.shape()[2..].iter().product();
            let gs = (0..s.numel())
                .map(|nc| go[nc * inner..(nc + 1) * inner].iter().sum())
                .collect();
            vec![need(0).then(|| gout.clone()), need(1).then(|| like(s, gs))]
        }
        Op::Affine { scale, .. } => vec![Some(gout.map(|g| g * scale))],
        Op::Concat => {
            let first = inputs[0].shape();
            let inner: usize = first[2..].iter().product();
            let total_c: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut res = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let ci = t.shape()[1];
                if need(i) {
                    let mut g = Vec::with_capacity(t.numel());
                    for n in 0..first[0] {
                        let start = (n * total_c + offset) * inner;
                        g.extend_from_slice(&go[start..start + ci * inner]);
                    }
                    res.push(Some(like(t, g)));
                } else {
                    res.push(None);
                }
                offset += ci;
            }
            res
        }
        Op::Softmax => {
            let y = output.data();
            let last = *output.shape().last().unwrap();
            let mut g = vec![0.0; y.len()];
            for ((gr, yr), gor) in g.chunks_mut(last).zip(y.chunks(last)).zip(go.chunks(last)) {
                let dot: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                for ((gv, yv), gov) in gr.iter_mut().zip(yr).zip(gor) {
                    *gv = yv * (gov - dot);
                }
            }
            vec![Some(like(inputs[0], g))]
        }
        Op::BatchMatmul => {
            let (a, bm) = (inputs[0], inputs[1]);
            let (b, m, k, n) = matmul_dims(op, a, bm)?;
            let mut res = vec![None, None];
            if need(0) {
                // dA = dC · Bᵀ
                let mut ga = vec![0.0; a.numel()];
                bmm(go, bm.data(), &mut ga, b, m, n, k, false, true);
                res[0] = Some(like(a, ga));
            }
            if need(1) {
                // dB = Aᵀ · dC
                let mut gb = vec![0.0; bm.numel()];
                bmm(a.data(), go, &mut gb, b, k, m, n, true, false);
                res[1] = Some(like(bm, gb));
            }
            res
        }
        Op::Transpose => {
            let (data, _) = transpose_last2(go, gout.shape());
            vec![Some(like(inputs[0], data))]
        }
        Op::Reshape { .. } => vec![Some(like(inputs[0], go.to_vec()))],
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), go[0]))],
        Op::Mean => vec![Some(Tensor::full(
            inputs[0].shape(),
            go[0] / inputs[0].numel() as f64,
        ))],
        Op::Abs => {
            let x = inputs[0];
            let g = x
                .data()
                .iter()
                .zip(go)
                .map(|(&v, &g)| g * sign(v))
                .collect();
            vec![Some(like(x, g))]
        }
        Op::Square => {
            let x = inputs[0];
            let g = x
                .data()
                .iter()
                .zip(go)
                .map(|(&v, &g)| 2.0 * v * g)
                .collect();
            vec![Some(like(x, g))]
        }
    })
}

/// Subgradient of |x| with sign(0) = 0.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
