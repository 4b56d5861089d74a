//! Direct 3D convolution kernels.
//!
//! Every convolution here is described from the point of view of the
//! "big" tensor (the conv input, or the transposed-conv output) and the
//! "small" tensor (conv output, transposed-conv input). Three loops cover
//! all six forward/backward cases:
//!
//! * `gather`: small += W ⋆ big (conv forward, transposed-conv input grad)
//! * `scatter`: big += Wᵀ ⋆ small (conv input grad, transposed-conv forward)
//! * `weight_grad`: dW += small ⊗ big

/// Shapes and hyper-parameters of one convolution, layout `[N, C, D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_big: usize,
    pub big: [usize; 3],
    pub c_small: usize,
    pub small: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

/// Output extent along one axis of a strided, padded convolution.
pub(crate) fn conv_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent along one axis of a transposed convolution.
pub(crate) fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad || stride == 0 {
        return None;
    }
    Some(full - 2 * pad)
}

/// Range of small-side indices `o` for which `o*stride + k - pad` lands inside `[0, big)`.
#[inline]
fn valid_range(small: usize, big: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let top = big as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = small.min(top as usize / stride + 1);
    (lo, hi.max(lo))
}

struct Ranges {
    d: [(usize, usize); 3],
}

impl ConvGeom {
    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn ranges(&self, kd: usize, kh: usize, kw: usize) -> Ranges {
        let ks = [kd, kh, kw];
        let mut d = [(0, 0); 3];
        for a in 0..3 {
            d[a] = valid_range(self.small[a], self.big[a], self.stride, self.pad, ks[a]);
        }
        Ranges { d }
    }

    #[inline]
    fn big_index(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad
    }

    /// Visits every (small row, big row, weight) triple. The callback receives
    /// the weight index, the small-row offset, the big-row offset and the
    /// valid `[lo, hi)` range along the fastest axis.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [kd_n, kh_n, kw_n] = self.kernel;
        let [_, sh, sw] = self.small;
        let [_, bh, bw] = self.big;
        let small_len = self.small_len();
        let big_len = self.big_len();
        let kvol = kd_n * kh_n * kw_n;
        for n in 0..self.batch {
            for cs in 0..self.c_small {
                let s_base = (n * self.c_small + cs) * small_len;
                for cb in 0..self.c_big {
                    let b_base = (n * self.c_big + cb) * big_len;
                    let w_base = (cs * self.c_big + cb) * kvol;
                    for kd in 0..kd_n {
                        for kh in 0..kh_n {
                            for kw in 0..kw_n {
                                let r = self.ranges(kd, kh, kw);
                                let (wlo, whi) = r.d[2];
                                if wlo >= whi {
                                    continue;
                                }
                                let widx = w_base + (kd * kh_n + kh) * kw_n + kw;
                                for od in r.d[0].0..r.d[0].1 {
                                    let id = self.big_index(od, kd);
                                    for oh in r.d[1].0..r.d[1].1 {
                                        let ih = self.big_index(oh, kh);
                                        let s_row = s_base + (od * sh + oh) * sw;
                                        let b_row = b_base + (id * bh + ih) * bw;
                                        // offset of column kw in the big row
                                        f(widx, s_row, b_row + kw, wlo, whi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `small[o] += Σ w · big[o*stride + k - pad]`.
    pub fn gather(&self, big: &[f64], weight: &[f64], small: &mut [f64]) {
        let s = self.stride;
        let p = self.pad;
        self.for_each_row(|widx, s_row, b_row_k, lo, hi| {
            let w = weight[widx];
            let out = &mut small[s_row + lo..s_row + hi];
            // big column for o is o*s + kw - pad; b_row_k already includes kw
            let start = b_row_k + lo * s - p;
            if s == 1 {
                let inp = &big[start..start + (hi - lo)];
                for (o, i) in out.iter_mut().zip(inp) {
                    *o += w * i;
                }
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += w * big[start + j * s];
                }
            }
        });
    }

    /// Adjoint of [`gather`](Self::gather) with respect to `big`.
    pub fn scatter(&self, small: &[f64], weight: &[f64], big: &mut [f64]) {
        let s = self.stride;
        let p = self.pad;
        self.for_each_row(|widx, s_row, b_row_k, lo, hi| {
            let w = weight[widx];
            let inp = &small[s_row + lo..s_row + hi];
            let start = b_row_k + lo * s - p;
            if s == 1 {
                let out = &mut big[start..start + (hi - lo)];
                for (o, i) in out.iter_mut().zip(inp) {
                    *o += w * i;
                }
            } else {
                for (j, i) in inp.iter().enumerate() {
                    big[start + j * s] += w * i;
                }
            }
        });
    }

    /// Adjoint of [`gather`](Self::gather) with respect to the weights.
    pub fn weight_grad(&self, small: &[f64], big: &[f64], dweight: &mut [f64]) {
        let s = self.stride;
        let p = self.pad;
        self.for_each_row(|widx, s_row, b_row_k, lo, hi| {
            let a = &small[s_row + lo..s_row + hi];
            let start = b_row_k + lo * s - p;
            let acc: f64 = if s == 1 {
                a.iter()
                    .zip(&big[start..start + (hi - lo)])
                    .map(|(x, y)| x * y)
                    .sum()
            } else {
                a.iter()
                    .enumerate()
                    .map(|(j, x)| x * big[start + j * s])
                    .sum()
            };
            dweight[widx] += acc;
        });
    }
}
