//! FCKPT1 container.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 6 | magic `FCKPT1` |
//! | 1 | section: 1 denoiser, 2 autoencoder |
//! | 4 + m | `u32` m, then UTF-8 `key=value` lines |
//! | 4 | `u32` tensor count |
//! | per tensor | `u32` name length, name, `u32` ndim, `u32` dims |
//! | 8·n | `f64` payloads, in table order |

use std::fs;
use std::path::Path;

use super::{AttentionSpec, DenoiserSpec, Params};
use crate::error::{Error, FormatError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 6] = b"FCKPT1";
const MAX_NDIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Denoiser,
    Autoencoder,
}

impl Section {
    fn code(self) -> u8 {
        match self {
            Section::Denoiser => 1,
            Section::Autoencoder => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Section::Denoiser),
            2 => Some(Section::Autoencoder),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub section: Section,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(section: Section) -> Self {
        Checkpoint {
            section,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint field `{key}` has bad value `{raw}`")))
    }

    /// Appends every parameter under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &Params) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Collects the tensors under `prefix`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> Result<Params> {
        Params::from_entries(
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode_checkpoint(self))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(decode_checkpoint(&fs::read(path)?)?)
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = CKPT_MAGIC.to_vec();
    out.push(c.section.code());
    let meta: String = c.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &c.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
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

    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn utf8(&mut self, n: usize, field: &'static str) -> Result<&'a str, FormatError> {
        std::str::from_utf8(self.take(n)?).map_err(|e| FormatError::InvalidField {
            field,
            detail: e.to_string(),
        })
    }
}

fn bad(field: &'static str, detail: impl Into<String>) -> FormatError {
    FormatError::InvalidField {
        field,
        detail: detail.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(FormatError::BadMagic { expected: "FCKPT1" });
    }
    let mut r = Reader {
        buf: bytes,
        pos: CKPT_MAGIC.len(),
    };
    let code = r.take(1)?[0];
    let section =
        Section::from_code(code).ok_or_else(|| bad("section", format!("unknown code {code}")))?;

    let meta_len = r.u32()?;
    let text = r.utf8(meta_len, "meta")?;
    let mut meta: Vec<(String, String)> = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad("meta", format!("line without `=`: {line:?}")))?;
        if meta.iter().any(|(key, _)| key == k) {
            return Err(bad("meta", format!("duplicate key {k}")));
        }
        meta.push((k.to_string(), v.to_string()));
    }

    let count = r.u32()?;
    let mut table = Vec::new();
    let mut total: usize = 0;
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.utf8(name_len, "tensor name")?.to_string();
        if table.iter().any(|(n, _): &(String, Vec<usize>)| *n == name) {
            return Err(bad("tensor name", format!("duplicate {name}")));
        }
        let ndim = r.u32()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(bad("ndim", format!("{name}: {ndim} not in 1..={MAX_NDIM}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        let numel = shape
            .iter()
            .try_fold(
                1usize,
                |acc, &d| if d == 0 { None } else { acc.checked_mul(d) },
            )
            .ok_or_else(|| bad("dims", format!("{name}: {shape:?} is empty or overflows")))?;
        total = total
            .checked_add(numel)
            .filter(|t| t.checked_mul(8).is_some())
            .ok_or_else(|| bad("dims", "payload size overflows"))?;
        table.push((name, shape));
    }

    let payload = &bytes[r.pos..];
    if payload.len() < total * 8 {
        return Err(FormatError::Truncated {
            offset: r.pos,
            needed: total * 8,
            available: payload.len(),
        });
    }
    if payload.len() > total * 8 {
        return Err(FormatError::Trailing(payload.len() - total * 8));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad("tensor", e.to_string()))?;
        tensors.push((name, t));
    }
    Ok(Checkpoint {
        section,
        meta,
        tensors,
    })
}

pub fn write_spec(c: &mut Checkpoint, spec: &DenoiserSpec) {
    let channels: Vec<String> = spec.channels.iter().map(|c| c.to_string()).collect();
    c.set("spec.data_channels", spec.data_channels);
    c.set("spec.cond_channels", spec.cond_channels);
    c.set("spec.channels", channels.join(","));
    c.set("spec.blocks_per_level", spec.blocks_per_level);
    c.set("spec.time_embed_dim", spec.time_embed_dim);
    c.set("spec.attention.enabled", spec.attention.enabled);
    c.set("spec.attention.heads", spec.attention.heads);
    c.set("spec.attention.head_channels", spec.attention.head_channels);
}

pub fn read_spec(c: &Checkpoint) -> Result<DenoiserSpec> {
    let channels = c
        .require("spec.channels")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("spec.channels: {e}")))?;
    let spec = DenoiserSpec {
        data_channels: c.parse("spec.data_channels")?,
        cond_channels: c.parse("spec.cond_channels")?,
        channels,
        blocks_per_level: c.parse("spec.blocks_per_level")?,
        time_embed_dim: c.parse("spec.time_embed_dim")?,
        attention: AttentionSpec {
            enabled: c.parse("spec.attention.enabled")?,
            heads: c.parse("spec.attention.heads")?,
            head_channels: c.parse("spec.attention.head_channels")?,
        },
    };
    spec.validate()?;
    Ok(spec)
}

pub fn write_schedule(c: &mut Checkpoint, s: &NoiseSchedule) {
    let (b0, b1) = s.beta_range();
    c.set("schedule.steps", s.steps());
    c.set("schedule.beta_start", b0);
    c.set("schedule.beta_end", b1);
}

pub fn read_schedule(c: &Checkpoint) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(
        c.parse("schedule.steps")?,
        c.parse("schedule.beta_start")?,
        c.parse("schedule.beta_end")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let spec = DenoiserSpec::tiny();
        let mut c = Checkpoint::new(Section::Denoiser);
        write_spec(&mut c, &spec);
        write_schedule(&mut c, &NoiseSchedule::desk());
        c.set("step", 12);
        c.push_params("", &init_params(&spec, 4).unwrap());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(read_spec(&back).unwrap(), DenoiserSpec::tiny());
        assert_eq!(read_schedule(&back).unwrap(), NoiseSchedule::desk());
        assert_eq!(
            back.params("").unwrap(),
            init_params(&DenoiserSpec::tiny(), 4).unwrap()
        );
    }

    #[test]
    fn diagnostics() {
        let bytes = encode_checkpoint(&sample());
        assert_eq!(
            decode_checkpoint(b"FVOL1xx"),
            Err(FormatError::BadMagic { expected: "FCKPT1" })
        );
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode_checkpoint(&long), Err(FormatError::Trailing(1)));
        let mut sec = bytes;
        sec[6] = 7;
        assert!(matches!(
            decode_checkpoint(&sec),
            Err(FormatError::InvalidField {
                field: "section",
                ..
            })
        ));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
