//! Deterministic paired MRI/PET-like phantoms.
//!
//! The MRI-like volume is a sum of soft-edged ellipsoids inside a head
//! ellipsoid. The PET-like volume is a fixed monotone function of the MRI
//! intensity ([`pet_law`]) plus optional Gaussian noise, so the mapping is
//! learnable but not the identity. Pair `i` draws from stream `i` of a
//! ChaCha8 generator keyed by the spec seed, independent of the dataset size.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::rng::stream_rng;
use crate::volume::{Dims3, Mask3, Volume3};

/// Width of the logistic edge, in units of the ellipsoid radius.
const EDGE: f64 = 0.08;
/// MRI intensity that maps to the top of the smoothstep.
const MRI_SPAN: f64 = 1.4;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims3,
    pub n_ellipsoids: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// emit the cerebellum and CTX masks
    pub masks: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims3::cube(16),
            n_ellipsoids: 5,
            noise_sigma: 0.02,
            seed: 0,
            masks: true,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.nx < 4 || d.ny < 4 || d.nz < 4 {
            return Err(invalid(format!(
                "phantom dims {}x{}x{} must be at least 4 per axis",
                d.nx, d.ny, d.nz
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// `key = value` sidecar text.
    pub fn to_sidecar(&self) -> String {
        let d = self.dims;
        format!(
            "phantom.dims = {},{},{}\nphantom.n_ellipsoids = {}\nphantom.noise_sigma = {}\nphantom.seed = {}\nphantom.masks = {}\n",
            d.nx, d.ny, d.nz, self.n_ellipsoids, self.noise_sigma, self.seed, self.masks
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub mri: Volume3,
    pub pet: Volume3,
    pub cerebellum: Option<Mask3>,
    pub ctx: Option<Mask3>,
}

/// Monotone non-decreasing MRI → PET intensity map: a smoothstep with two
/// band offsets.
pub fn pet_law(u: f64) -> f64 {
    let v = (u / MRI_SPAN).clamp(0.0, 1.0);
    let mut p = 0.1 + v * v * (3.0 - 2.0 * v);
    if u > 0.55 {
        p += 0.25;
    }
    if u > 0.95 {
        p += 0.2;
    }
    p
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    amplitude: f64,
}

impl Ellipsoid {
    /// Normalized radius: 1 on the surface.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn soft(&self, p: [f64; 3]) -> f64 {
        self.amplitude / (1.0 + ((self.radius(p) - 1.0) / EDGE).exp())
    }
}

fn center_of(d: Dims3) -> [f64; 3] {
    [
        (d.nx as f64 - 1.0) / 2.0,
        (d.ny as f64 - 1.0) / 2.0,
        (d.nz as f64 - 1.0) / 2.0,
    ]
}

fn head(d: Dims3) -> Ellipsoid {
    Ellipsoid {
        center: center_of(d),
        radii: [0.42 * d.nx as f64, 0.44 * d.ny as f64, 0.42 * d.nz as f64],
        amplitude: 0.3,
    }
}

fn inner_ellipsoids(d: Dims3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let c = center_of(d);
    let size = [d.nx as f64, d.ny as f64, d.nz as f64];
    (0..n)
        .map(|_| {
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for i in 0..3 {
                center[i] = c[i] + rng.random_range(-0.2..0.2) * size[i];
                radii[i] = rng.random_range(0.1..0.25) * size[i];
            }
            let amplitude = if rng.random_bool(0.75) {
                rng.random_range(0.25..0.6)
            } else {
                -rng.random_range(0.1..0.2)
            };
            Ellipsoid {
                center,
                radii,
                amplitude,
            }
        })
        .collect()
}

/// Cerebellum: a low posterior ellipsoid. CTX: the upper half of a shell
/// just inside the head surface, minus the cerebellum.
pub fn region_masks(d: Dims3) -> (Mask3, Mask3) {
    let h = head(d);
    let c = center_of(d);
    let cereb = Ellipsoid {
        center: [c[0], c[1] + 0.22 * d.ny as f64, c[2] - 0.22 * d.nz as f64],
        radii: [0.2 * d.nx as f64, 0.14 * d.ny as f64, 0.14 * d.nz as f64],
        amplitude: 1.0,
    };
    let point = |x: usize, y: usize, z: usize| [x as f64, y as f64, z as f64];
    let cerebellum = Mask3::from_fn(d, |x, y, z| cereb.radius(point(x, y, z)) <= 1.0);
    let ctx = Mask3::from_fn(d, |x, y, z| {
        let p = point(x, y, z);
        let r = h.radius(p);
        (0.6..=0.95).contains(&r) && p[2] >= c[2] && cereb.radius(p) > 1.0
    });
    (cerebellum, ctx)
}

/// Pair `index` of the dataset described by `spec`.
pub fn generate_pair_at(spec: &PhantomSpec, index: u64) -> Result<PhantomPair> {
    spec.validate()?;
    let d = spec.dims;
    let mut rng = stream_rng(spec.seed, index);
    let mut shapes = vec![head(d)];
    shapes.extend(inner_ellipsoids(d, spec.n_ellipsoids, &mut rng));
    let mri = Volume3::from_fn(d, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        shapes.iter().map(|e| e.soft(p)).sum::<f64>().max(0.0)
    })?;
    let noise = crate::rng::normal_vec(&mut rng, d.len());
    let pet_voxels = mri
        .voxels()
        .iter()
        .zip(&noise)
        .map(|(&u, &n)| (pet_law(u) + spec.noise_sigma * n).max(0.0))
        .collect();
    let pet = Volume3::new(d, pet_voxels)?;
    let (cerebellum, ctx) = if spec.masks {
        let (a, b) = region_masks(d);
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(PhantomPair {
        mri,
        pet,
        cerebellum,
        ctx,
    })
}

pub fn generate_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    generate_pair_at(spec, 0)
}

pub fn generate_dataset(spec: &PhantomSpec, n: usize) -> Result<Vec<PhantomPair>> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    (0..n as u64).map(|i| generate_pair_at(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn deterministic_and_index_independent() {
        let spec = PhantomSpec::default();
        assert_eq!(generate_pair(&spec).unwrap(), generate_pair(&spec).unwrap());
        let small = generate_dataset(&spec, 2).unwrap();
        let large = generate_dataset(&spec, 5).unwrap();
        assert_eq!(small[..], large[..2]);
        assert_ne!(large[0].mri, large[1].mri);
    }

    #[test]
    fn noiseless_pet_is_monotone_in_mri() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let p = generate_pair(&spec).unwrap();
        let mut idx: Vec<usize> = (0..p.mri.voxels().len()).collect();
        idx.sort_by(|&a, &b| p.mri.voxels()[a].total_cmp(&p.mri.voxels()[b]));
        for w in idx.windows(2) {
            assert!(p.pet.voxels()[w[0]] <= p.pet.voxels()[w[1]]);
        }
        for (&u, &v) in p.mri.voxels().iter().zip(p.pet.voxels()) {
            assert_eq!(v, pet_law(u));
        }
    }

    #[test]
    fn default_pair_is_correlated() {
        let p = generate_pair(&PhantomSpec::default()).unwrap();
        assert!(pearson(p.mri.voxels(), p.pet.voxels()) > 0.5);
    }

    #[test]
    fn masks_disjoint_and_nonempty() {
        for n in [8, 16, 32] {
            let (c, x) = region_masks(Dims3::cube(n));
            assert!(c.count() > 0 && x.count() > 0, "n={n}");
            assert!(c.is_disjoint(&x));
        }
    }

    #[test]
    fn rejects_degenerate_dims() {
        let spec = PhantomSpec {
            dims: Dims3::new(16, 2, 16),
            ..Default::default()
        };
        assert!(generate_pair(&spec).is_err());
        assert!(generate_dataset(&PhantomSpec::default(), 0).is_err());
    }
}
