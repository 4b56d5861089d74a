//! Finite-difference checks for every autodiff primitive plus loop-based
//! convolution oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voldiff::autodiff::gradcheck::gradient_check;
use voldiff::autodiff::{Graph, Op, Var};
use voldiff::Tensor;

const CASES: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep clear of |x| < 1e-2 so abs() stays differentiable under the FD step
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.01..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks the gradient of `sum(op(inputs) * probe)` with respect to every input.
fn check_all_inputs(op: &Op, inputs: &[Tensor], rng: &mut ChaCha8Rng, case: usize) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = g.apply(op.clone(), &vars).unwrap();
    let probe = rand_tensor(rng, g.value(y).shape());
    for which in 0..inputs.len() {
        let report = gradient_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { g.constant(t.clone()) })
                    .collect();
                let y = g.apply(op.clone(), &vars)?;
                let p = g.constant(probe.clone());
                let yp = g.mul(y, p)?;
                g.sum(yp)
            },
            &inputs[which],
            H,
            TOL,
        )
        .unwrap();
        assert!(
            report.passed(),
            "{} case {case} input {which}: {report:?}",
            op.name()
        );
    }
}

fn run_cases(seed: u64, mut make: impl FnMut(&mut ChaCha8Rng) -> (Op, Vec<Tensor>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..CASES {
        let (op, inputs) = make(&mut rng);
        check_all_inputs(&op, &inputs, &mut rng, case);
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn conv3d_gradients() {
    run_cases(1, |rng| {
        let stride = dims(rng, 1, 2);
        let pad = dims(rng, 0, 1);
        let k = dims(rng, 1, 3);
        let sp: Vec<usize> = (0..3).map(|_| dims(rng, k.max(2), 4)).collect();
        let (n, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 1, 3));
        let x = rand_tensor(rng, &[n, ci, sp[0], sp[1], sp[2]]);
        let w = rand_tensor(rng, &[co, ci, k, k, k]);
        let mut inputs = vec![x, w];
        if rng.random_bool(0.5) {
            inputs.push(rand_tensor(rng, &[co]));
        }
        (
            Op::Conv3d {
                stride,
                padding: pad,
            },
            inputs,
        )
    });
}

#[test]
fn conv_transpose3d_gradients() {
    run_cases(2, |rng| {
        let stride = dims(rng, 1, 2);
        let k = dims(rng, 1, 3);
        let pad = if k == 3 { dims(rng, 0, 1) } else { 0 };
        let sp: Vec<usize> = (0..3).map(|_| dims(rng, 1, 3)).collect();
        let (n, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 2));
        let x = rand_tensor(rng, &[n, ci, sp[0], sp[1], sp[2]]);
        let w = rand_tensor(rng, &[ci, co, k, k, k]);
        let mut inputs = vec![x, w];
        if rng.random_bool(0.5) {
            inputs.push(rand_tensor(rng, &[co]));
        }
        (
            Op::ConvTranspose3d {
                stride,
                padding: pad,
            },
            inputs,
        )
    });
}

#[test]
fn linear_gradients() {
    run_cases(3, |rng| {
        let (rows, fin, fout) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 5));
        let mut inputs = vec![
            rand_tensor(rng, &[rows, fin]),
            rand_tensor(rng, &[fout, fin]),
        ];
        if rng.random_bool(0.5) {
            inputs.push(rand_tensor(rng, &[fout]));
        }
        (Op::Linear, inputs)
    });
}

#[test]
fn group_norm_gradients() {
    run_cases(4, |rng| {
        let groups = dims(rng, 1, 3);
        let c = groups * dims(rng, 1, 2);
        let sp: Vec<usize> = (0..3).map(|_| dims(rng, 1, 3)).collect();
        let n = dims(rng, 1, 2);
        let inputs = vec![
            rand_tensor(rng, &[n, c, sp[0], sp[1], sp[2]]),
            rand_tensor(rng, &[c]),
            rand_tensor(rng, &[c]),
        ];
        (Op::GroupNorm { groups, eps: 1e-5 }, inputs)
    });
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = dims(rng, 1, 4);
    (0..rank).map(|_| dims(rng, 1, 3)).collect()
}

#[test]
fn unary_gradients() {
    let mut seed = 10;
    for op in [
        Op::Silu,
        Op::Abs,
        Op::Square,
        Op::Sum,
        Op::Mean,
        Op::Softmax,
        Op::Affine {
            scale: -1.7,
            shift: 0.3,
        },
    ] {
        run_cases(seed, |rng| {
            let shape = random_shape(rng);
            (op.clone(), vec![rand_tensor(rng, &shape)])
        });
        seed += 1;
    }
}

#[test]
fn binary_elementwise_gradients() {
    let mut seed = 20;
    for op in [Op::Add, Op::Sub, Op::Mul] {
        run_cases(seed, |rng| {
            let shape = random_shape(rng);
            (
                op.clone(),
                vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)],
            )
        });
        seed += 1;
    }
}

#[test]
fn add_channel_gradients() {
    run_cases(30, |rng| {
        let (n, c) = (dims(rng, 1, 2), dims(rng, 1, 3));
        let rest: Vec<usize> = (0..dims(rng, 0, 3)).map(|_| dims(rng, 1, 3)).collect();
        let mut shape = vec![n, c];
        shape.extend(rest);
        (
            Op::AddChannel,
            vec![rand_tensor(rng, &shape), rand_tensor(rng, &[n, c])],
        )
    });
}

#[test]
fn concat_gradients() {
    run_cases(31, |rng| {
        let n = dims(rng, 1, 2);
        let rest: Vec<usize> = (0..dims(rng, 0, 3)).map(|_| dims(rng, 1, 3)).collect();
        let parts = dims(rng, 1, 3);
        let inputs = (0..parts)
            .map(|_| {
                let mut s = vec![n, dims(rng, 1, 3)];
                s.extend(rest.iter().copied());
                rand_tensor(rng, &s)
            })
            .collect();
        (Op::Concat, inputs)
    });
}

#[test]
fn batch_matmul_gradients() {
    run_cases(32, |rng| {
        let (b, m, k, n) = (
            dims(rng, 1, 3),
            dims(rng, 1, 4),
            dims(rng, 1, 4),
            dims(rng, 1, 4),
        );
        (
            Op::BatchMatmul,
            vec![rand_tensor(rng, &[b, m, k]), rand_tensor(rng, &[b, k, n])],
        )
    });
}

#[test]
fn transpose_and_reshape_gradients() {
    run_cases(33, |rng| {
        let mut shape = random_shape(rng);
        if shape.len() < 2 {
            shape.push(dims(rng, 1, 3));
        }
        (Op::Transpose, vec![rand_tensor(rng, &shape)])
    });
    run_cases(34, |rng| {
        let shape = random_shape(rng);
        let numel: usize = shape.iter().product();
        (
            Op::Reshape {
                shape: vec![numel, 1],
            },
            vec![rand_tensor(rng, &shape)],
        )
    });
}

/// Direct convolution with explicit loops over every index.
#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, k) = (ws[0], ws[2]);
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * od * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |bt| bt.data()[o]);
                        for c in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xo * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let xv =
                                            x.data()[(((b * ci + c) * d + iz) * h + iy) * wd + ix];
                                        let wv =
                                            w.data()[(((o * ci + c) * k + kz) * k + ky) * k + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[(((b * co + o) * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, od, oh, ow], out).unwrap()
}

#[test]
fn conv3d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor(&mut rng, &[1, 1, 4, 4, 4]);
    let w = rand_tensor(&mut rng, &[1, 1, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv3d(xv, wv, None, 1, 1).unwrap();
    let expect = naive_conv3d(&x, &w, None, 1, 1);
    assert!(g.value(y).max_abs_diff(&expect) <= 1e-12);

    for (stride, pad) in [(1, 0), (2, 1), (2, 0)] {
        let x = rand_tensor(&mut rng, &[2, 3, 5, 6, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
        let expect = naive_conv3d(&x, &w, Some(&b), stride, pad);
        assert_eq!(g.value(y).shape(), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) <= 1e-12);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> with the same weights
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let cx = g.conv3d(xv, wv, None, 2, 1).unwrap();
    let y = rand_tensor(&mut rng, g.value(cx).shape());
    let yv = g.constant(y.clone());
    let ty = g.conv_transpose3d(yv, wv, None, 2, 1).unwrap();
    assert_eq!(g.value(ty).shape(), x.shape());
    let lhs: f64 = g
        .value(cx)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let rhs: f64 = x
        .data()
        .iter()
        .zip(g.value(ty).data())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let (a, b) = (0.7, -2.3);
    let grad_of = |build: &dyn Fn(&mut Graph, Var) -> Var| {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&mut g, v);
        g.backward(out).unwrap().get(v)
    };
    let f = |g: &mut Graph, v: Var| {
        let s = g.silu(v).unwrap();
        let sq = g.square(s).unwrap();
        g.sum(sq).unwrap()
    };
    let h = |g: &mut Graph, v: Var| {
        let sm = g.softmax(v).unwrap();
        let ab = g.abs(v).unwrap();
        let m = g.mul(sm, ab).unwrap();
        g.mean(m).unwrap()
    };
    let combined = grad_of(&|g, v| {
        let fv = f(g, v);
        let hv = h(g, v);
        let fa = g.affine(fv, a, 0.0).unwrap();
        let hb = g.affine(hv, b, 0.0).unwrap();
        g.add(fa, hb).unwrap()
    });
    let gf = grad_of(&f);
    let gh = grad_of(&h);
    for i in 0..x.numel() {
        let expect = a * gf.data()[i] + b * gh.data()[i];
        assert!((combined.data()[i] - expect).abs() <= 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let w = rand_tensor(&mut rng, &[4, 2, 3, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv3d(xv, wv, None, 1, 1).unwrap();
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let n = g.group_norm(y, gamma, beta, 2, 1e-5).unwrap();
        g.value(n).clone()
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn group_norm_then_square_passes_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 8, 4, 4, 4]);
    let report = gradient_check(
        |g, v| {
            let gamma = g.constant(Tensor::full(&[8], 1.3));
            let beta = g.constant(Tensor::full(&[8], 0.2));
            let n = g.group_norm(v, gamma, beta, 8, 1e-5)?;
            let sq = g.square(n)?;
            g.sum(sq)
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
