use proptest::prelude::*;
use voldiff::volume::{
    decode_volume, encode_volume, read_volume, Dims3, NormTarget, RangeTag, Volume3,
};

#[test]
fn golden_ramp_file() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/ramp_2x3x4.fvol");
    let v = read_volume(path).unwrap();
    assert_eq!(v.dims(), Dims3::new(2, 3, 4));
    assert_eq!(v.range(), RangeTag::Raw);
    assert_eq!(v.extrema(), (0.0, 23.0));
    for z in 0..4 {
        for y in 0..3 {
            for x in 0..2 {
                assert_eq!(v.get(x, y, z), (x + 2 * y + 6 * z) as f64);
            }
        }
    }
    assert_eq!(encode_volume(&v), std::fs::read(path).unwrap());
}

/// Gradient magnitude straight from flat indices.
fn naive_gradient(d: Dims3, v: &[f64]) -> Vec<f64> {
    let (nx, ny, nz) = (d.nx, d.ny, d.nz);
    let at = |x: usize, y: usize, z: usize| v[x + nx * (y + ny * z)];
    let mut out = vec![0.0; v.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let gx = if x == 0 {
                    at(1, y, z) - at(0, y, z)
                } else if x == nx - 1 {
                    at(nx - 1, y, z) - at(nx - 2, y, z)
                } else {
                    (at(x + 1, y, z) - at(x - 1, y, z)) / 2.0
                };
                let gy = if y == 0 {
                    at(x, 1, z) - at(x, 0, z)
                } else if y == ny - 1 {
                    at(x, ny - 1, z) - at(x, ny - 2, z)
                } else {
                    (at(x, y + 1, z) - at(x, y - 1, z)) / 2.0
                };
                let gz = if z == 0 {
                    at(x, y, 1) - at(x, y, 0)
                } else if z == nz - 1 {
                    at(x, y, nz - 1) - at(x, y, nz - 2)
                } else {
                    (at(x, y, z + 1) - at(x, y, z - 1)) / 2.0
                };
                out[x + nx * (y + ny * z)] = (gx * gx + gy * gy + gz * gz).sqrt();
            }
        }
    }
    out
}

#[test]
fn gradient_of_sphere_matches_stencil_oracle() {
    let d = Dims3::new(9, 10, 11);
    let sphere = Volume3::from_fn(d, |x, y, z| {
        let r2 = (x as f64 - 4.0).powi(2) + (y as f64 - 4.5).powi(2) + (z as f64 - 5.0).powi(2);
        1.0 / (1.0 + (r2.sqrt() - 3.0).exp())
    })
    .unwrap();
    let g = sphere.gradient_magnitude().unwrap();
    for (a, b) in g.voxels().iter().zip(naive_gradient(d, sphere.voxels())) {
        assert!((a - b).abs() <= 1e-12);
    }
}

fn volume_strategy() -> impl Strategy<Value = Volume3> {
    (1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(x, y, z)| {
            (
                Just(Dims3::new(x, y, z)),
                prop::collection::vec(-100.0f64..100.0, x * y * z),
            )
        })
        .prop_map(|(d, v)| Volume3::new(d, v).unwrap())
}

proptest! {
    #[test]
    fn reserialization_is_byte_stable(v in volume_strategy()) {
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes).unwrap();
        prop_assert_eq!(encode_volume(&back), bytes);
        prop_assert_eq!(back.dims(), v.dims());
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn normalize_is_monotone_and_idempotent(v in volume_strategy()) {
        for target in [NormTarget::Train, NormTarget::Eval] {
            let n = v.normalize(target).unwrap();
            prop_assert_eq!(&n.normalize(target).unwrap(), &n);
            for i in 0..v.voxels().len() {
                for j in 0..v.voxels().len() {
                    if v.voxels()[i] < v.voxels()[j] {
                        prop_assert!(n.voxels()[i] <= n.voxels()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn train_eval_round_trip(v in volume_strategy()) {
        let t = v.normalize(NormTarget::Train).unwrap();
        let back = t.normalize(NormTarget::Eval).unwrap().normalize(NormTarget::Train).unwrap();
        for (a, b) in back.voxels().iter().zip(t.voxels()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(back.extrema(), t.extrema());
    }

    #[test]
    fn gradient_is_translation_equivariant(seed in 0u64..1000, shift in 1usize..3) {
        let d = Dims3::cube(8);
        let f = move |x: f64, y: f64, z: f64| {
            let s = seed as f64 * 0.01;
            (0.3 * x + s).sin() * (0.2 * y).cos() + 0.1 * z * z
        };
        let a = Volume3::from_fn(d, |x, y, z| f(x as f64, y as f64, z as f64)).unwrap();
        let b = Volume3::from_fn(d, |x, y, z| f((x + shift) as f64, y as f64, z as f64)).unwrap();
        let (ga, gb) = (a.gradient_magnitude().unwrap(), b.gradient_magnitude().unwrap());
        for z in 1..7 {
            for y in 1..7 {
                for x in 1..(7 - shift) {
                    prop_assert!((gb.get(x, y, z) - ga.get(x + shift, y, z)).abs() <= 1e-12);
                }
            }
        }
    }
}
