use crate::error::{invalid, Error, Result};
use crate::losses::{suvr_map, suvr_volume_to_train};
use crate::phantom::PhantomPair;
use crate::tensor::Tensor;
use crate::volume::{Mask3, NormTarget, Volume3};

/// What the network sees as the condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConditionMode {
    #[default]
    Mri,
    /// MRI plus its gradient-magnitude map as a second channel
    MriGradient,
}

impl ConditionMode {
    pub fn channels(self) -> usize {
        match self {
            ConditionMode::Mri => 1,
            ConditionMode::MriGradient => 2,
        }
    }
}

/// One training pair as `[1, c, d, h, w]` tensors in train range.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub condition: Tensor,
    pub target: Tensor,
    /// cortical region for the SUVr constraint
    pub ctx: Option<Mask3>,
}

impl Sample {
    pub fn new(condition: Tensor, target: Tensor) -> Result<Self> {
        let (c, t) = (condition.shape(), target.shape());
        if c.len() != t.len() || c.len() < 2 || c[0] != t[0] || c[2..] != t[2..] {
            return Err(Error::Shape {
                op: "sample",
                lhs: c.to_vec(),
                rhs: t.to_vec(),
            });
        }
        Ok(Sample {
            condition,
            target,
            ctx: None,
        })
    }

    /// Per-volume min/max normalization of both volumes.
    pub fn from_volumes(mri: &Volume3, pet: &Volume3, mode: ConditionMode) -> Result<Self> {
        check_dims(mri, pet)?;
        let target = pet.normalize(NormTarget::Train)?.to_tensor();
        Sample::new(condition_tensor(mri, mode)?, target)
    }

    /// Target is the SUVr map (SUV over the reference-region mean) through
    /// the fixed SUVr map; the CTX mask is kept for the constraint.
    pub fn suvr_from_volumes(
        mri: &Volume3,
        suv: &Volume3,
        reference: &Mask3,
        ctx: &Mask3,
        mode: ConditionMode,
    ) -> Result<Self> {
        check_dims(mri, suv)?;
        if ctx.dims() != mri.dims() {
            return Err(invalid("CTX mask dims differ from the volume"));
        }
        let target = suvr_volume_to_train(&suvr_map(suv, reference)?)?.to_tensor();
        let mut s = Sample::new(condition_tensor(mri, mode)?, target)?;
        s.ctx = Some(ctx.clone());
        Ok(s)
    }
}

fn check_dims(a: &Volume3, b: &Volume3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "pair",
            lhs: a.dims().as_array().to_vec(),
            rhs: b.dims().as_array().to_vec(),
        });
    }
    Ok(())
}

/// Train-range condition tensor for an MRI volume of any range.
pub fn condition_tensor(mri: &Volume3, mode: ConditionMode) -> Result<Tensor> {
    let m = mri.normalize(NormTarget::Train)?;
    match mode {
        ConditionMode::Mri => Ok(m.to_tensor()),
        ConditionMode::MriGradient => {
            let g = m.gradient_magnitude()?.normalize(NormTarget::Train)?;
            let (a, b) = (m.to_tensor(), g.to_tensor());
            let mut shape = a.shape().to_vec();
            shape[1] = 2;
            let mut data = a.into_data();
            data.extend_from_slice(b.data());
            Tensor::new(shape, data)
        }
    }
}

/// Training samples from phantom pairs; with `suvr` the PET volume is taken
/// as an SUV map and both masks must be present.
pub fn phantom_samples(
    pairs: &[PhantomPair],
    mode: ConditionMode,
    suvr: bool,
) -> Result<Vec<Sample>> {
    pairs
        .iter()
        .map(|p| {
            if suvr {
                match (&p.cerebellum, &p.ctx) {
                    (Some(c), Some(x)) => Sample::suvr_from_volumes(&p.mri, &p.pet, c, x, mode),
                    _ => Err(invalid("SUVr samples need cerebellum and CTX masks")),
                }
            } else {
                Sample::from_volumes(&p.mri, &p.pet, mode)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomSpec};

    #[test]
    fn samples_are_train_range() {
        let pairs = generate_dataset(&PhantomSpec::default(), 2).unwrap();
        for suvr in [false, true] {
            for mode in [ConditionMode::Mri, ConditionMode::MriGradient] {
                let s = phantom_samples(&pairs, mode, suvr).unwrap();
                assert_eq!(s[0].condition.shape(), &[1, mode.channels(), 16, 16, 16]);
                assert_eq!(s[0].target.shape(), &[1, 1, 16, 16, 16]);
                for t in [&s[0].condition, &s[0].target] {
                    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                }
                assert_eq!(s[0].ctx.is_some(), suvr);
            }
        }
    }
}
