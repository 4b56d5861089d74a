//! FVOL container.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 5 | magic `FVOL1` |
//! | 12 | `u32` nx, ny, nz |
//! | 1 | range tag: 0 raw, 1 train, 2 eval |
//! | 16 | `f64` stored min, max |
//! | 4·n | `f32` voxels, x fastest |
//!
//! Masks use the same container with range tag 0 and voxels in {0.0, 1.0}.
//! Voxels are quantized to `f32` on write.

use std::fs;
use std::path::Path;

use super::{Dims3, Mask3, RangeTag, Volume3};
use crate::error::{FormatError, Result};

pub const FVOL_MAGIC: &[u8; 5] = b"FVOL1";
const HEADER_LEN: usize = 5 + 12 + 1 + 16;

pub fn encode_volume(v: &Volume3) -> Vec<u8> {
    let d = v.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d.len());
    out.extend_from_slice(FVOL_MAGIC);
    for n in [d.nx, d.ny, d.nz] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.push(v.range().code());
    let (min, max) = v.extrema();
    out.extend_from_slice(&min.to_le_bytes());
    out.extend_from_slice(&max.to_le_bytes());
    for &x in v.voxels() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3, FormatError> {
    if bytes.len() < FVOL_MAGIC.len() || &bytes[..FVOL_MAGIC.len()] != FVOL_MAGIC {
        return Err(FormatError::BadMagic { expected: "FVOL1" });
    }
    let mut c = Cursor {
        buf: bytes,
        pos: FVOL_MAGIC.len(),
    };
    let (nx, ny, nz) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(FormatError::InvalidField {
            field: "dims",
            detail: format!("{nx}x{ny}x{nz} has a zero axis"),
        });
    }
    let tag_code = c.take(1)?[0];
    let range = RangeTag::from_code(tag_code).ok_or(FormatError::InvalidField {
        field: "range_tag",
        detail: format!("unknown code {tag_code}"),
    })?;
    let extrema = (c.f64()?, c.f64()?);
    let declared = nx
        .checked_mul(ny)
        .and_then(|n| n.checked_mul(nz))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or(FormatError::InvalidField {
            field: "dims",
            detail: format!("{nx}x{ny}x{nz} overflows"),
        })?;
    let payload = &bytes[c.pos..];
    if payload.len() < declared * 4 {
        return Err(FormatError::Truncated {
            offset: c.pos,
            needed: declared * 4,
            available: payload.len(),
        });
    }
    if payload.len() > declared * 4 {
        return Err(FormatError::DimMismatch {
            declared,
            actual: payload.len() / 4,
        });
    }
    let voxels: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Volume3::with_range(Dims3::new(nx, ny, nz), voxels, range, extrema).map_err(|e| {
        FormatError::InvalidField {
            field: "voxels",
            detail: e.to_string(),
        }
    })
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume3) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let bytes = fs::read(path)?;
    Ok(decode_volume(&bytes)?)
}

pub fn write_mask(path: impl AsRef<Path>, m: &Mask3) -> Result<()> {
    write_volume(path, &m.to_volume())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3> {
    Mask3::from_volume(&read_volume(path)?)
}
