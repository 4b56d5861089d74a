//! Training objectives.
//!
//! Plain functions evaluate losses on tensors; the `graph_*` builders record
//! the same reductions in an autodiff graph for training.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::volume::{Mask3, RangeTag, Volume3};

/// Fixed SUVr ↔ train-range map: `x = s / SUVR_SCALE − 1`, so SUVr in
/// [0, 3.2] lands on [−1, 1].
pub const SUVR_SCALE: f64 = 1.6;

pub fn suvr_to_train(s: f64) -> f64 {
    s / SUVR_SCALE - 1.0
}

pub fn train_to_suvr(x: f64) -> f64 {
    (x + 1.0) * SUVR_SCALE
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_noise: f64,
    pub l_image: f64,
    pub l_total: f64,
    /// (global, CTX-masked) SUVr ℓ1, when the SUVr constraint is active
    pub l_suvr: Option<(f64, f64)>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        let suvr = self
            .l_suvr
            .is_none_or(|(a, b)| a.is_finite() && b.is_finite());
        self.l_noise.is_finite() && self.l_image.is_finite() && self.l_total.is_finite() && suvr
    }

    /// Field-wise mean of a non-empty set of reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let l_suvr = if reports.iter().all(|r| r.l_suvr.is_some()) && !reports.is_empty() {
            Some((sum(|r| r.l_suvr.unwrap().0), sum(|r| r.l_suvr.unwrap().1)))
        } else {
            None
        };
        LossReport {
            l_noise: sum(|r| r.l_noise),
            l_image: sum(|r| r.l_image),
            l_total: sum(|r| r.l_total),
            l_suvr,
        }
    }
}

/// Mean of (ε − ε̃)².
pub fn noise_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    eps.expect_same_shape(eps_hat, "noise_loss")?;
    let s: f64 = eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / eps.numel() as f64)
}

/// Mean of |x0 − x̃0|.
pub fn image_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    x0.expect_same_shape(x0_hat, "image_loss")?;
    let s: f64 = x0
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / x0.numel() as f64)
}

pub fn hybrid_loss(
    eps: &Tensor,
    eps_hat: &Tensor,
    x0: &Tensor,
    x0_hat: &Tensor,
) -> Result<LossReport> {
    let l_noise = noise_loss(eps, eps_hat)?;
    let l_image = image_loss(x0, x0_hat)?;
    Ok(LossReport {
        l_noise,
        l_image,
        l_total: l_noise + l_image,
        l_suvr: None,
    })
}

/// SUV divided by its mean over the reference region.
pub fn suvr_map(suv: &Volume3, reference: &Mask3) -> Result<Volume3> {
    if suv.dims() != reference.dims() {
        return Err(Error::Shape {
            op: "suvr_map",
            lhs: suv.dims().as_array().to_vec(),
            rhs: reference.dims().as_array().to_vec(),
        });
    }
    let r = reference.masked_mean(suv.voxels())?;
    if !(r > 0.0) {
        return Err(invalid(format!(
            "reference region mean {r} is not positive"
        )));
    }
    let voxels = suv.voxels().iter().map(|v| v / r).collect();
    Volume3::new(suv.dims(), voxels)
}

/// (mean |Δ| over all voxels, mean |Δ| over the CTX voxels).
pub fn suvr_constraint(suvr_true: &[f64], suvr_hat: &[f64], ctx: &Mask3) -> Result<(f64, f64)> {
    if suvr_true.len() != suvr_hat.len() {
        return Err(Error::Shape {
            op: "suvr_constraint",
            lhs: vec![suvr_true.len()],
            rhs: vec![suvr_hat.len()],
        });
    }
    let diff: Vec<f64> = suvr_true
        .iter()
        .zip(suvr_hat)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let global = diff.iter().sum::<f64>() / diff.len() as f64;
    Ok((global, ctx.masked_mean(&diff)?))
}

/// Volume form of [`suvr_constraint`].
pub fn suvr_constraint_volumes(
    suvr_true: &Volume3,
    suvr_hat: &Volume3,
    ctx: &Mask3,
) -> Result<(f64, f64)> {
    if suvr_true.dims() != suvr_hat.dims() || suvr_true.dims() != ctx.dims() {
        return Err(Error::Shape {
            op: "suvr_constraint",
            lhs: suvr_true.dims().as_array().to_vec(),
            rhs: suvr_hat.dims().as_array().to_vec(),
        });
    }
    suvr_constraint(suvr_true.voxels(), suvr_hat.voxels(), ctx)
}

/// SUVr map to train range through the fixed map.
pub fn suvr_volume_to_train(suvr: &Volume3) -> Result<Volume3> {
    let voxels: Vec<f64> = suvr
        .voxels()
        .iter()
        .map(|&s| suvr_to_train(s).clamp(-1.0, 1.0))
        .collect();
    Volume3::with_range(
        suvr.dims(),
        voxels,
        RangeTag::Train,
        (0.0, 2.0 * SUVR_SCALE),
    )
}

pub fn graph_noise_loss(g: &mut Graph, eps: Var, eps_hat: Var) -> Result<Var> {
    let d = g.sub(eps, eps_hat)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

pub fn graph_image_loss(g: &mut Graph, x0: Var, x0_hat: Var) -> Result<Var> {
    let d = g.sub(x0, x0_hat)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// x̃0 as a graph node: `x_t/√ᾱ − √(1−ᾱ)/√ᾱ · ε̃`.
pub fn graph_estimate_x0(
    g: &mut Graph,
    x_t: Var,
    eps_hat: Var,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let (a, b) = sched.signal_noise_coeffs(t)?;
    let scaled = g.affine(eps_hat, -b / a, 0.0)?;
    let xs = g.affine(x_t, 1.0 / a, 0.0)?;
    g.add(xs, scaled)
}

/// Masked mean of |Δ| with a constant 0/1 mask tensor.
pub fn graph_masked_l1(g: &mut Graph, diff_abs: Var, mask: &Mask3) -> Result<Var> {
    let n = mask.count();
    if n == 0 {
        return Err(invalid("masked ℓ1: mask is empty"));
    }
    let shape = g.value(diff_abs).shape().to_vec();
    let m = mask
        .voxels()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, m)?);
    let masked = g.mul(diff_abs, m)?;
    let s = g.sum(masked)?;
    g.affine(s, 1.0 / n as f64, 0.0)
}

/// SUVr-unit ℓ1 terms between train-range x0 and x̃0 nodes:
/// (global mean, CTX-masked mean).
pub fn graph_suvr_constraint(
    g: &mut Graph,
    x0: Var,
    x0_hat: Var,
    ctx: &Mask3,
) -> Result<(Var, Var)> {
    // the +1 shifts cancel in the difference
    let d = g.sub(x0, x0_hat)?;
    let d = g.affine(d, SUVR_SCALE, 0.0)?;
    let a = g.abs(d)?;
    let global = g.mean(a)?;
    let masked = graph_masked_l1(g, a, ctx)?;
    Ok((global, masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims3;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn constant_offsets() {
        let e = t(vec![0.1, -0.4, 2.0, 0.0]);
        assert_eq!(noise_loss(&e, &e).unwrap(), 0.0);
        assert!((noise_loss(&e, &e.map(|v| v + 0.3)).unwrap() - 0.09).abs() < 1e-12);
        assert!((image_loss(&e, &e.map(|v| v + 0.2)).unwrap() - 0.2).abs() < 1e-12);
        assert!(noise_loss(&e, &t(vec![1.0])).is_err());
    }

    #[test]
    fn hybrid_is_a_plain_sum() {
        let e = t(vec![0.0; 4]);
        let r = hybrid_loss(&e, &e.map(|_| 0.3), &e, &e.map(|_| 0.2)).unwrap();
        assert!((r.l_noise - 0.09).abs() < 1e-12);
        assert!((r.l_image - 0.2).abs() < 1e-12);
        assert_eq!(r.l_total, r.l_noise + r.l_image);
        assert!((r.l_total - 0.29).abs() < 1e-12);
    }

    #[test]
    fn suvr_division() {
        let d = Dims3::new(2, 1, 1);
        let suv = Volume3::new(d, vec![2.0, 3.0]).unwrap();
        let m = Mask3::new(d, vec![true, false]).unwrap();
        assert_eq!(suvr_map(&suv, &m).unwrap().voxels(), &[1.0, 1.5]);
        let none = Mask3::new(d, vec![false, false]).unwrap();
        assert!(suvr_map(&suv, &none).is_err());
        let neg = Volume3::new(d, vec![-1.0, 3.0]).unwrap();
        assert!(suvr_map(&neg, &m).is_err());
    }

    #[test]
    fn suvr_constraint_masked_vs_global() {
        let d = Dims3::cube(2);
        let ctx = Mask3::from_fn(d, |x, y, z| x + y + z == 0);
        let truth = vec![1.0; 8];
        let hat: Vec<f64> = (0..8).map(|i| if i == 0 { 1.1 } else { 1.0 }).collect();
        let (g, m) = suvr_constraint(&truth, &hat, &ctx).unwrap();
        assert!((g - 0.0125).abs() < 1e-12);
        assert!((m - 0.1).abs() < 1e-12);
        assert_eq!(suvr_constraint(&truth, &truth, &ctx).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn suvr_map_round_trip() {
        for s in [0.0, 1.0, 1.6, 3.2] {
            assert!((train_to_suvr(suvr_to_train(s)) - s).abs() < 1e-12);
        }
        assert_eq!(suvr_to_train(3.2), 1.0);
    }

    #[test]
    fn graph_losses_match_plain() {
        let a = t(vec![0.3, -1.0, 0.5]);
        let b = t(vec![0.1, 0.2, 0.5]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let n = graph_noise_loss(&mut g, va, vb).unwrap();
        let i = graph_image_loss(&mut g, va, vb).unwrap();
        assert!((g.value(n).data()[0] - noise_loss(&a, &b).unwrap()).abs() < 1e-15);
        assert!((g.value(i).data()[0] - image_loss(&a, &b).unwrap()).abs() < 1e-15);
    }
}
