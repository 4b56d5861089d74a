//! Dense 3D scalar volumes, binary masks and the geometry helpers shared by
//! the rest of the crate.

mod io;

pub use io::{
    decode_volume, encode_volume, read_mask, read_volume, write_mask, write_volume, FVOL_MAGIC,
};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims3 { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims3 {
            nx: n,
            ny: n,
            nz: n,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear offset of `(x, y, z)`, x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Tensor shape `[1, 1, nz, ny, nx]` for a single-channel volume.
    pub fn tensor_shape(&self) -> [usize; 5] {
        [1, 1, self.nz, self.ny, self.nx]
    }
}

/// Declared intensity range of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RangeTag {
    Raw,
    /// every voxel in [-1, 1]
    Train,
    /// every voxel in [0, 1]
    Eval,
}

impl RangeTag {
    pub fn code(self) -> u8 {
        match self {
            RangeTag::Raw => 0,
            RangeTag::Train => 1,
            RangeTag::Eval => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RangeTag::Raw),
            1 => Some(RangeTag::Train),
            2 => Some(RangeTag::Eval),
            _ => None,
        }
    }

    fn bounds(self) -> Option<(f64, f64)> {
        match self {
            RangeTag::Raw => None,
            RangeTag::Train => Some((-1.0, 1.0)),
            RangeTag::Eval => Some((0.0, 1.0)),
        }
    }
}

/// Target interval for [`Volume3::normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormTarget {
    Train,
    Eval,
}

impl NormTarget {
    fn tag(self) -> RangeTag {
        match self {
            NormTarget::Train => RangeTag::Train,
            NormTarget::Eval => RangeTag::Eval,
        }
    }
}

/// A dense 3D scalar field, x-fastest.
///
/// `extrema` records the raw-unit `[min, max]` that the normalized range
/// corresponds to, so normalized volumes can be mapped back to raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    dims: Dims3,
    voxels: Vec<f64>,
    range: RangeTag,
    extrema: (f64, f64),
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

impl Volume3 {
    /// A raw volume; the recorded extrema are its own min and max.
    pub fn new(dims: Dims3, voxels: Vec<f64>) -> Result<Self> {
        let extrema = min_max(&voxels);
        Self::with_range(dims, voxels, RangeTag::Raw, extrema)
    }

    pub fn with_range(
        dims: Dims3,
        voxels: Vec<f64>,
        range: RangeTag,
        extrema: (f64, f64),
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(invalid(format!("volume dims {dims:?} must be positive")));
        }
        if voxels.len() != dims.len() {
            return Err(Error::Shape {
                op: "volume",
                lhs: dims.as_array().to_vec(),
                rhs: vec![voxels.len()],
            });
        }
        if let Some((lo, hi)) = range.bounds() {
            if let Some((i, v)) = voxels
                .iter()
                .enumerate()
                .find(|(_, v)| !(lo..=hi).contains(*v))
            {
                return Err(invalid(format!(
                    "voxel {i} = {v} outside the {range:?} range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Volume3 {
            dims,
            voxels,
            range,
            extrema,
        })
    }

    pub fn filled(dims: Dims3, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    /// Builds a raw volume from `f(x, y, z)`.
    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxels)
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn extrema(&self) -> (f64, f64) {
        self.extrema
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn with_extrema(mut self, extrema: (f64, f64)) -> Self {
        self.extrema = extrema;
        self
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims.tensor_shape().to_vec(), self.voxels.clone()).expect("volume shape")
    }

    /// Reinterprets a `[1, 1, nz, ny, nx]` tensor as a volume.
    pub fn from_tensor(t: &Tensor, range: RangeTag, extrema: (f64, f64)) -> Result<Self> {
        let s = t.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(Error::Shape {
                op: "volume_from_tensor",
                lhs: s.to_vec(),
                rhs: vec![1, 1, 0, 0, 0],
            });
        }
        Self::with_range(
            Dims3::new(s[4], s[3], s[2]),
            t.data().to_vec(),
            range,
            extrema,
        )
    }

    /// Affinely maps the volume onto the target interval.
    ///
    /// Raw volumes map their own `[min, max]` (a constant volume maps to the
    /// interval midpoint); train and eval volumes convert between the two
    /// fixed intervals. Already-normalized volumes are returned unchanged.
    pub fn normalize(&self, target: NormTarget) -> Result<Volume3> {
        let tag = target.tag();
        if self.range == tag {
            return Ok(self.clone());
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("normalize: voxel {i} is not finite")));
        }
        let (lo, hi) = tag.bounds().expect("normalized tag");
        let (voxels, extrema) = match self.range {
            RangeTag::Raw => {
                let (min, max) = min_max(&self.voxels);
                let mapped = if max > min {
                    self.voxels
                        .iter()
                        .map(|v| lo + (v - min) / (max - min) * (hi - lo))
                        .collect()
                } else {
                    vec![0.5 * (lo + hi); self.voxels.len()]
                };
                (mapped, (min, max))
            }
            RangeTag::Train => (
                self.voxels.iter().map(|v| (v + 1.0) * 0.5).collect(),
                self.extrema,
            ),
            RangeTag::Eval => (
                self.voxels.iter().map(|v| 2.0 * v - 1.0).collect(),
                self.extrema,
            ),
        };
        Volume3::with_range(self.dims, voxels, tag, extrema)
    }

    /// Maps a normalized volume back to raw units using the stored extrema.
    pub fn denormalize(&self) -> Volume3 {
        let (min, max) = self.extrema;
        let unit: Box<dyn Fn(f64) -> f64> = match self.range {
            RangeTag::Raw => return self.clone(),
            RangeTag::Train => Box::new(|v| (v + 1.0) * 0.5),
            RangeTag::Eval => Box::new(|v| v),
        };
        let voxels = self
            .voxels
            .iter()
            .map(|&v| min + unit(v) * (max - min))
            .collect();
        Volume3 {
            dims: self.dims,
            voxels,
            range: RangeTag::Raw,
            extrema: self.extrema,
        }
    }

    /// Clips to the interval of `tag` and retags.
    pub fn clamp_to(&self, tag: NormTarget) -> Volume3 {
        let (lo, hi) = tag.tag().bounds().expect("normalized tag");
        Volume3 {
            dims: self.dims,
            voxels: self.voxels.iter().map(|v| v.clamp(lo, hi)).collect(),
            range: tag.tag(),
            extrema: self.extrema,
        }
    }

    /// Central `target` sub-block, offset `floor((dims - target) / 2)` per axis.
    pub fn crop_center(&self, target: Dims3) -> Result<Volume3> {
        let (d, t) = (self.dims.as_array(), target.as_array());
        if t.iter().zip(&d).any(|(t, d)| t > d || *t == 0) {
            return Err(invalid(format!(
                "crop_center: target {target:?} exceeds dims {:?}",
                self.dims
            )));
        }
        let off: Vec<usize> = d.iter().zip(&t).map(|(d, t)| (d - t) / 2).collect();
        let mut voxels = Vec::with_capacity(target.len());
        for z in 0..target.nz {
            for y in 0..target.ny {
                let start = self.dims.index(off[0], y + off[1], z + off[2]);
                voxels.extend_from_slice(&self.voxels[start..start + target.nx]);
            }
        }
        Ok(Volume3 {
            dims: target,
            voxels,
            range: self.range,
            extrema: self.extrema,
        })
    }

    /// Embeds the volume centrally in a `target` block filled with `fill`.
    pub fn pad_to(&self, target: Dims3, fill: f64) -> Result<Volume3> {
        let (d, t) = (self.dims.as_array(), target.as_array());
        if t.iter().zip(&d).any(|(t, d)| t < d) {
            return Err(invalid(format!(
                "pad_to: target {target:?} smaller than dims {:?}",
                self.dims
            )));
        }
        let off: Vec<usize> = t.iter().zip(&d).map(|(t, d)| (t - d) / 2).collect();
        let mut voxels = vec![fill; target.len()];
        for z in 0..self.dims.nz {
            for y in 0..self.dims.ny {
                let src = self.dims.index(0, y, z);
                let dst = target.index(off[0], y + off[1], z + off[2]);
                voxels[dst..dst + self.dims.nx]
                    .copy_from_slice(&self.voxels[src..src + self.dims.nx]);
            }
        }
        let range = match self.range.bounds() {
            Some((lo, hi)) if (lo..=hi).contains(&fill) => self.range,
            Some(_) => RangeTag::Raw,
            None => RangeTag::Raw,
        };
        Ok(Volume3 {
            dims: target,
            voxels,
            range,
            extrema: self.extrema,
        })
    }

    /// Per-voxel Euclidean norm of the intensity gradient.
    ///
    /// Central differences in the interior, one-sided differences on the
    /// boundary, unit voxel spacing. The result is a raw volume.
    pub fn gradient_magnitude(&self) -> Result<Volume3> {
        let d = self.dims;
        if d.nx < 3 || d.ny < 3 || d.nz < 3 {
            return Err(invalid(format!(
                "gradient_magnitude needs at least 3 voxels per axis, got {d:?}"
            )));
        }
        let diff = |len: usize, i: usize, at: &dyn Fn(usize) -> f64| -> f64 {
            if i == 0 {
                at(1) - at(0)
            } else if i == len - 1 {
                at(len - 1) - at(len - 2)
            } else {
                0.5 * (at(i + 1) - at(i - 1))
            }
        };
        let mut out = Vec::with_capacity(d.len());
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let gx = diff(d.nx, x, &|i| self.get(i, y, z));
                    let gy = diff(d.ny, y, &|i| self.get(x, i, z));
                    let gz = diff(d.nz, z, &|i| self.get(x, y, i));
                    out.push((gx * gx + gy * gy + gz * gz).sqrt());
                }
            }
        }
        Volume3::new(d, out)
    }
}

/// Binary voxel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask3 {
    dims: Dims3,
    voxels: Vec<bool>,
}

impl Mask3 {
    pub fn new(dims: Dims3, voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != dims.len() || dims.is_empty() {
            return Err(Error::Shape {
                op: "mask",
                lhs: dims.as_array().to_vec(),
                rhs: vec![voxels.len()],
            });
        }
        Ok(Mask3 { dims, voxels })
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Mask3 { dims, voxels }
    }

    /// Interprets a volume with voxels in {0, 1} as a mask.
    pub fn from_volume(v: &Volume3) -> Result<Self> {
        let voxels = v
            .voxels()
            .iter()
            .enumerate()
            .map(|(i, &x)| match x {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(invalid(format!("mask voxel {i} = {x} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Mask3::new(v.dims(), voxels)
    }

    pub fn to_volume(&self) -> Volume3 {
        let voxels = self
            .voxels
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Volume3::with_range(self.dims, voxels, RangeTag::Raw, (0.0, 1.0)).expect("mask volume")
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&b| b).count()
    }

    pub fn is_disjoint(&self, other: &Mask3) -> bool {
        self.voxels.iter().zip(&other.voxels).all(|(a, b)| !(a & b))
    }

    /// Mean of `v` over the masked voxels.
    pub fn masked_mean(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.voxels.len() {
            return Err(Error::Shape {
                op: "masked_mean",
                lhs: self.dims.as_array().to_vec(),
                rhs: vec![v.len()],
            });
        }
        let n = self.count();
        if n == 0 {
            return Err(invalid("masked_mean: mask is empty"));
        }
        let total: f64 = self
            .voxels
            .iter()
            .zip(v)
            .filter(|(m, _)| **m)
            .map(|(_, x)| x)
            .sum();
        Ok(total / n as f64)
    }
}
