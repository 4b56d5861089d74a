//! Image quality metrics on eval-range volumes, SUVr quantification and the
//! CSV report layout.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::volume::{Dims3, Mask3, RangeTag, Volume3};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const NMI_BINS: usize = 32;

/// PSNR in dB; identical inputs have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn check_pair(a: &Volume3, b: &Volume3, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op,
            lhs: a.dims().as_array().to_vec(),
            rhs: b.dims().as_array().to_vec(),
        });
    }
    for v in [a, b] {
        if v.range() != RangeTag::Eval {
            return Err(invalid(format!(
                "{op}: expected eval-range volumes, got {:?}",
                v.range()
            )));
        }
    }
    Ok(())
}

fn check_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// PSNR with peak 1 over raw voxel slices.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<Psnr> {
    check_len(a, b, "psnr")?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(-10.0 * mse.log10())
    })
}

pub fn mae_values(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b, "mae")?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &Volume3, b: &Volume3) -> Result<Psnr> {
    check_pair(a, b, "psnr")?;
    psnr_values(a.voxels(), b.voxels())
}

pub fn mae(a: &Volume3, b: &Volume3) -> Result<f64> {
    check_pair(a, b, "mae")?;
    mae_values(a.voxels(), b.voxels())
}

/// Summed-volume table with a zero border: `s[(z+1, y+1, x+1)]` is the sum
/// of all voxels with coordinates ≤ (x, y, z).
struct Integral {
    nx: usize,
    ny: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(d: Dims3, f: impl Fn(usize) -> f64) -> Self {
        let (nx, ny) = (d.nx + 1, d.ny + 1);
        let mut s = vec![0.0; nx * ny * (d.nz + 1)];
        let at = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        for z in 1..=d.nz {
            for y in 1..=d.ny {
                for x in 1..=d.nx {
                    let v = f(d.index(x - 1, y - 1, z - 1));
                    s[at(x, y, z)] =
                        v + s[at(x - 1, y, z)] + s[at(x, y - 1, z)] + s[at(x, y, z - 1)]
                            - s[at(x - 1, y - 1, z)]
                            - s[at(x - 1, y, z - 1)]
                            - s[at(x, y - 1, z - 1)]
                            + s[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Integral { nx, ny, s }
    }

    /// Sum over the cube with corner (x, y, z) and side w.
    fn cube(&self, x: usize, y: usize, z: usize, w: usize) -> f64 {
        let at = |x: usize, y: usize, z: usize| self.s[(z * self.ny + y) * self.nx + x];
        let (x1, y1, z1) = (x + w, y + w, z + w);
        at(x1, y1, z1) - at(x, y1, z1) - at(x1, y, z1) - at(x1, y1, z)
            + at(x, y, z1)
            + at(x, y1, z)
            + at(x1, y, z)
            - at(x, y, z)
    }
}

/// Mean local SSIM over every valid position of a uniform `window`³ cube,
/// dynamic range 1.
pub fn ssim3d_values(
    dims: Dims3,
    a: &[f64],
    b: &[f64],
    window: usize,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    check_len(a, b, "ssim3d")?;
    if a.len() != dims.len() {
        return Err(Error::Shape {
            op: "ssim3d",
            lhs: dims.as_array().to_vec(),
            rhs: vec![a.len()],
        });
    }
    if window == 0 || window > dims.nx || window > dims.ny || window > dims.nz {
        return Err(invalid(format!(
            "ssim window {window} does not fit in {dims:?}"
        )));
    }
    let (c1, c2) = ((k1 * 1.0).powi(2), (k2 * 1.0).powi(2));
    let sa = Integral::new(dims, |i| a[i]);
    let sb = Integral::new(dims, |i| b[i]);
    let saa = Integral::new(dims, |i| a[i] * a[i]);
    let sbb = Integral::new(dims, |i| b[i] * b[i]);
    let sab = Integral::new(dims, |i| a[i] * b[i]);
    let n = (window * window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=dims.nz - window {
        for y in 0..=dims.ny - window {
            for x in 0..=dims.nx - window {
                let ma = sa.cube(x, y, z, window) / n;
                let mb = sb.cube(x, y, z, window) / n;
                let va = (saa.cube(x, y, z, window) / n - ma * ma).max(0.0);
                let vb = (sbb.cube(x, y, z, window) / n - mb * mb).max(0.0);
                let cov = sab.cube(x, y, z, window) / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn ssim3d(a: &Volume3, b: &Volume3, window: usize, k1: f64, k2: f64) -> Result<f64> {
    check_pair(a, b, "ssim3d")?;
    ssim3d_values(a.dims(), a.voxels(), b.voxels(), window, k1, k2)
}

/// SSIM with the default 7³ window and constants.
pub fn ssim(a: &Volume3, b: &Volume3) -> Result<f64> {
    ssim3d(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Joint counts over `bins` equal-width bins on [0, 1], row-major in `a`.
pub fn joint_histogram(a: &[f64], b: &[f64], bins: usize) -> Result<Vec<usize>> {
    check_len(a, b, "nmi")?;
    if bins < 2 {
        return Err(invalid(format!("nmi needs at least 2 bins, got {bins}")));
    }
    let mut h = vec![0usize; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        h[bin_of(x, bins) * bins + bin_of(y, bins)] += 1;
    }
    Ok(h)
}

/// Shannon entropy in nats of a count vector.
pub fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(A;B) / (H(A) + H(B))`; defined as 1 when both inputs fall in a
/// single bin.
pub fn nmi_values(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    let joint = joint_histogram(a, b, bins)?;
    let mut ha = vec![0usize; bins];
    let mut hb = vec![0usize; bins];
    for i in 0..bins {
        for j in 0..bins {
            ha[i] += joint[i * bins + j];
            hb[j] += joint[i * bins + j];
        }
    }
    let (ea, eb, eab) = (entropy(&ha), entropy(&hb), entropy(&joint));
    if ea + eb == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * (ea + eb - eab) / (ea + eb)).clamp(0.0, 1.0))
}

pub fn nmi(a: &Volume3, b: &Volume3, bins: usize) -> Result<f64> {
    check_pair(a, b, "nmi")?;
    nmi_values(a.voxels(), b.voxels(), bins)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CentiloidAnchors {
    pub suvr_yc: f64,
    pub suvr_ad: f64,
}

impl CentiloidAnchors {
    pub fn new(suvr_yc: f64, suvr_ad: f64) -> Result<Self> {
        if !(suvr_yc > 0.0 && suvr_ad > suvr_yc && suvr_ad.is_finite()) {
            return Err(invalid(format!(
                "centiloid anchors need 0 < yc < ad, got ({suvr_yc}, {suvr_ad})"
            )));
        }
        Ok(CentiloidAnchors { suvr_yc, suvr_ad })
    }
}

impl Default for CentiloidAnchors {
    fn default() -> Self {
        CentiloidAnchors {
            suvr_yc: 1.008,
            suvr_ad: 1.996,
        }
    }
}

pub fn centiloid(suvr_ind: f64, anchors: CentiloidAnchors) -> f64 {
    100.0 * (suvr_ind - anchors.suvr_yc) / (anchors.suvr_ad - anchors.suvr_yc)
}

/// Mean SUVr over the cortical target region.
pub fn ctx_mean_suvr(suvr: &Volume3, ctx: &Mask3) -> Result<f64> {
    if suvr.dims() != ctx.dims() {
        return Err(Error::Shape {
            op: "ctx_mean_suvr",
            lhs: suvr.dims().as_array().to_vec(),
            rhs: ctx.dims().as_array().to_vec(),
        });
    }
    ctx.masked_mean(suvr.voxels())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub pair: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub mae: f64,
    pub nmi: f64,
}

pub fn evaluate_pair(
    pair: impl Into<String>,
    pred: &Volume3,
    truth: &Volume3,
) -> Result<MetricRow> {
    Ok(MetricRow {
        pair: pair.into(),
        psnr: psnr(pred, truth)?,
        ssim: ssim(pred, truth)?,
        mae: mae(pred, truth)?,
        nmi: nmi(pred, truth, NMI_BINS)?,
    })
}

/// Mean and sample standard deviation; 0 spread for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `pair,psnr,ssim,mae,nmi` rows then `mean` and `std` footers. Infinite
/// PSNR rows are left out of the PSNR aggregate and counted in a trailing
/// comment line.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("pair,psnr,ssim,mae,nmi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.pair, r.psnr, r.ssim, r.mae, r.nmi
        ));
    }
    let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr.finite()).collect();
    let col = |f: fn(&MetricRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    let p = mean_std(&finite);
    let (s, m, n) = (col(|r| r.ssim), col(|r| r.mae), col(|r| r.nmi));
    out.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6}\n",
        p.0, s.0, m.0, n.0
    ));
    out.push_str(&format!(
        "std,{:.6},{:.6},{:.6},{:.6}\n",
        p.1, s.1, m.1, n.1
    ));
    let excluded = rows.len() - finite.len();
    if excluded > 0 {
        out.push_str(&format!(
            "# {excluded} identical pair(s) excluded from psnr aggregate\n"
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub pred: String,
    pub truth: String,
}

/// Pair manifest: one `id,pred_path,truth_path` per line; blank lines and
/// `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Config(format!(
                "manifest line {}: expected `id,pred,truth`, got {line:?}",
                i + 1
            )));
        }
        if out.iter().any(|e| e.id == fields[0]) {
            return Err(Error::Config(format!(
                "manifest line {}: duplicate id {}",
                i + 1,
                fields[0]
            )));
        }
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            pred: fields[1].to_string(),
            truth: fields[2].to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config("manifest has no entries".into()));
    }
    Ok(out)
}
