use proptest::prelude::*;
use rand::Rng;
use voldiff::losses::suvr_map;
use voldiff::metrics::{
    centiloid, ctx_mean_suvr, entropy, joint_histogram, mae, nmi, nmi_values, psnr, ssim, ssim3d,
    CentiloidAnchors, Psnr, NMI_BINS,
};
use voldiff::rng::stream_rng;
use voldiff::volume::{Dims3, Mask3, RangeTag, Volume3};

fn eval(d: Dims3, v: Vec<f64>) -> Volume3 {
    Volume3::with_range(d, v, RangeTag::Eval, (0.0, 1.0)).unwrap()
}

fn uniform(d: Dims3, seed: u64) -> Volume3 {
    let mut rng = stream_rng(seed, 0);
    eval(d, (0..d.len()).map(|_| rng.random::<f64>()).collect())
}

fn naive_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    10.0 * (1.0 / (se / a.len() as f64)).log10()
}

/// Brute-force window loops with two-pass moments.
fn naive_ssim(d: Dims3, a: &[f64], b: &[f64], w: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for oz in 0..=d.nz - w {
        for oy in 0..=d.ny - w {
            for ox in 0..=d.nx - w {
                let mut xa = Vec::new();
                let mut xb = Vec::new();
                for z in oz..oz + w {
                    for y in oy..oy + w {
                        for x in ox..ox + w {
                            xa.push(a[d.index(x, y, z)]);
                            xb.push(b[d.index(x, y, z)]);
                        }
                    }
                }
                let n = xa.len() as f64;
                let ma = xa.iter().sum::<f64>() / n;
                let mb = xb.iter().sum::<f64>() / n;
                let va = xa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                let vb = xb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                let cov = xa
                    .iter()
                    .zip(&xb)
                    .map(|(p, q)| (p - ma) * (q - mb))
                    .sum::<f64>()
                    / n;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

fn naive_nmi(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let bin = |v: f64| ((v * bins as f64).floor() as usize).min(bins - 1);
    let n = a.len() as f64;
    let mut pab = vec![vec![0.0; bins]; bins];
    for (x, y) in a.iter().zip(b) {
        pab[bin(*x)][bin(*y)] += 1.0 / n;
    }
    let pa: Vec<f64> = pab.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..bins).map(|j| pab.iter().map(|r| r[j]).sum()).collect();
    let h = |p: &[f64]| {
        -p.iter()
            .filter(|&&q| q > 0.0)
            .map(|q| q * q.ln())
            .sum::<f64>()
    };
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            if pab[i][j] > 0.0 {
                mi += pab[i][j] * (pab[i][j] / (pa[i] * pb[j])).ln();
            }
        }
    }
    2.0 * mi / (h(&pa) + h(&pb))
}

#[test]
fn psnr_and_mae_match_naive_loops() {
    let d = Dims3::new(6, 7, 8);
    for seed in 0..5 {
        let (a, b) = (uniform(d, seed), uniform(d, seed + 100));
        let Psnr::Finite(p) = psnr(&a, &b).unwrap() else {
            panic!()
        };
        assert!((p - naive_psnr(a.voxels(), b.voxels())).abs() <= 1e-10);
        let m: f64 = a
            .voxels()
            .iter()
            .zip(b.voxels())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / d.len() as f64;
        assert!((mae(&a, &b).unwrap() - m).abs() <= 1e-12);
    }
}

#[test]
fn constant_offset_psnr_is_20_log_inverse_mae() {
    let d = Dims3::cube(5);
    for off in [0.01, 0.05, 0.1, 0.25] {
        let a = uniform(d, 3)
            .voxels()
            .iter()
            .map(|v| v * (1.0 - off))
            .collect::<Vec<_>>();
        let b = a.iter().map(|v| v + off).collect();
        let (a, b) = (eval(d, a), eval(d, b));
        let Psnr::Finite(p) = psnr(&a, &b).unwrap() else {
            panic!()
        };
        assert!(
            (p - 20.0 * (1.0 / mae(&a, &b).unwrap()).log10()).abs() <= 1e-9,
            "{off}"
        );
    }
}

#[test]
fn ssim_matches_naive_windows() {
    let d = Dims3::new(9, 8, 10);
    for seed in 0..3 {
        let a = uniform(d, seed);
        let b = eval(
            d,
            a.voxels()
                .iter()
                .enumerate()
                .map(|(i, v)| (0.7 * v + 0.2 * ((i % 5) as f64 / 4.0)).min(1.0))
                .collect(),
        );
        for w in [3, 7] {
            let fast = ssim3d(&a, &b, w, 0.01, 0.03).unwrap();
            assert!(
                (fast - naive_ssim(d, a.voxels(), b.voxels(), w)).abs() <= 1e-10,
                "w={w}"
            );
        }
        assert_eq!(
            ssim(&a, &b).unwrap(),
            ssim3d(&a, &b, 7, 0.01, 0.03).unwrap()
        );
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn nmi_matches_naive_counting() {
    let d = Dims3::cube(10);
    for seed in 0..4 {
        let a = uniform(d, seed);
        let b = eval(
            d,
            a.voxels()
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 3 == 0 { 1.0 - v } else { v * v })
                .collect(),
        );
        for bins in [2, 7, NMI_BINS] {
            let fast = nmi(&a, &b, bins).unwrap();
            assert!(
                (fast - naive_nmi(a.voxels(), b.voxels(), bins)).abs() <= 1e-12,
                "bins={bins}"
            );
        }
        let joint = joint_histogram(a.voxels(), b.voxels(), NMI_BINS).unwrap();
        assert_eq!(joint.iter().sum::<usize>(), d.len());
        let n = d.len() as f64;
        let h: f64 = joint
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| -(c as f64 / n) * (c as f64 / n).ln())
            .sum();
        assert!((entropy(&joint) - h).abs() <= 1e-12);
    }
}

#[test]
fn nmi_of_independent_uniform_volumes_is_small() {
    let d = Dims3::cube(32);
    let v = nmi(&uniform(d, 1), &uniform(d, 2), NMI_BINS).unwrap();
    assert!(v < 0.1, "{v}");
}

#[test]
fn nmi_ignores_within_bin_monotone_remap() {
    let d = Dims3::cube(9);
    let (a, b) = (uniform(d, 8), uniform(d, 9));
    let bins = NMI_BINS as f64;
    // squash each bin towards its lower edge; strictly monotone, edges shared
    let remap = |v: &Volume3| {
        eval(
            d,
            v.voxels()
                .iter()
                .map(|&x| {
                    let k = (x * bins).floor().min(bins - 1.0);
                    (k + 0.5 * (x * bins - k).powi(2)) / bins
                })
                .collect(),
        )
    };
    let base = nmi(&a, &b, NMI_BINS).unwrap();
    assert!((nmi(&remap(&a), &remap(&b), NMI_BINS).unwrap() - base).abs() <= 1e-12);
    assert!((nmi(&b, &a, NMI_BINS).unwrap() - base).abs() <= 1e-12);
    assert_eq!(nmi(&a, &a, NMI_BINS).unwrap(), 1.0);
}

#[test]
fn ssim_of_constant_volumes_matches_closed_form() {
    let d = Dims3::cube(8);
    let (a, b) = (eval(d, vec![0.5; d.len()]), eval(d, vec![0.6; d.len()]));
    let closed = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
    assert!((ssim(&a, &b).unwrap() - closed).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn centiloid_matches_hand_arithmetic(
        yc in 0.5f64..1.5,
        gap in 0.1f64..2.0,
        s in 0.0f64..4.0,
        alpha in 0.5f64..3.0,
        beta in 0.0f64..1.0,
    ) {
        let ad = yc + gap;
        let anchors = CentiloidAnchors::new(yc, ad).unwrap();
        let hand = 100.0 * s / gap - 100.0 * yc / gap;
        prop_assert!((centiloid(s, anchors) - hand).abs() <= 1e-9 * hand.abs().max(1.0));
        let scaled = CentiloidAnchors::new(alpha * yc + beta, alpha * ad + beta).unwrap();
        prop_assert!((centiloid(alpha * s + beta, scaled) - centiloid(s, anchors)).abs() <= 1e-9 * hand.abs().max(1.0));
    }

    #[test]
    fn nmi_values_is_symmetric(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let a: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + 0.3 * rng.random::<f64>()).min(1.0)).collect();
        let (ab, ba) = (nmi_values(&a, &b, 16).unwrap(), nmi_values(&b, &a, 16).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}

#[test]
fn suvr_pipeline_matches_masked_mean_oracle() {
    let d = Dims3::cube(6);
    let mut rng = stream_rng(31, 0);
    let suv = Volume3::new(d, (0..d.len()).map(|_| 0.5 + rng.random::<f64>()).collect()).unwrap();
    let cereb = Mask3::from_fn(d, |x, y, z| z < 2 && x > 1 && y > 1);
    let ctx = Mask3::from_fn(d, |x, _, z| z > 3 && x % 2 == 0);
    let mut ref_sum = 0.0;
    let mut ref_n = 0.0;
    let mut ctx_sum = 0.0;
    let mut ctx_n = 0.0;
    for i in 0..d.len() {
        if cereb.voxels()[i] {
            ref_sum += suv.voxels()[i];
            ref_n += 1.0;
        }
    }
    let r = ref_sum / ref_n;
    for i in 0..d.len() {
        if ctx.voxels()[i] {
            ctx_sum += suv.voxels()[i] / r;
            ctx_n += 1.0;
        }
    }
    let suvr = suvr_map(&suv, &cereb).unwrap();
    for i in 0..d.len() {
        assert!((suvr.voxels()[i] - suv.voxels()[i] / r).abs() <= 1e-12);
    }
    assert!((ctx_mean_suvr(&suvr, &ctx).unwrap() - ctx_sum / ctx_n).abs() <= 1e-12);
}
