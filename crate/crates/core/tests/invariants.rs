//! Property tests of the invariants every component must hold for arbitrary inputs.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use proptest::prelude::*;

use phirec_core::acquisition::{
    fft2c, forward_acquire, ifft2c, make_mask, zero_fill_recon, MaskPattern,
};
use phirec_core::metrics::{cumulative_variance, ncc, ssim};
use phirec_core::objective::{alpha_weights, gaussian_kl};
use phirec_core::segmentation::{gamma_map, SegmentationProbMap};
use phirec_core::{ComplexImage64, Provenance, ReconstructionSampleSet};

fn image(size: usize, values: &[(f64, f64)]) -> ComplexImage64 {
    let data = Array2::from_shape_fn((size, size), |(y, x)| {
        let (re, im) = values[(y * size + x) % values.len()];
        Complex::new(re + (y as f64) * 0.01, im - (x as f64) * 0.02)
    });
    ComplexImage64::new(data, Provenance::GroundTruth).unwrap()
}

fn energy(a: impl IntoIterator<Item = Complex<f64>>) -> f64 {
    a.into_iter().map(|c| c.norm_sqr()).sum()
}

fn pattern() -> impl Strategy<Value = MaskPattern> {
    prop_oneof![
        Just(MaskPattern::PoissonDisc),
        Just(MaskPattern::CartesianRandom),
        Just(MaskPattern::Equispaced)
    ]
}

/// Line patterns at 16x leave room for only a narrow calibration band on 64 rows.
fn calib_for(pattern: MaskPattern) -> f64 {
    match pattern {
        MaskPattern::PoissonDisc => 0.08,
        _ => 0.04,
    }
}

fn prob_map(c: usize, h: usize, w: usize, raw: &[f64]) -> SegmentationProbMap {
    let mut probs = Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        1e-3 + raw[(k * h * w + y * w + x) % raw.len()]
    });
    for y in 0..h {
        for x in 0..w {
            let total: f64 = (0..c).map(|k| probs[(k, y, x)]).sum();
            for k in 0..c {
                probs[(k, y, x)] /= total;
            }
        }
    }
    SegmentationProbMap::new(probs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_is_unitary_and_invertible(
        log_size in 2usize..6,
        values in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..64),
    ) {
        let size = 1 << log_size;
        let x = image(size, &values);
        let k = fft2c(&x);
        let e = energy(x.data().iter().copied());
        prop_assert!((energy(k.iter().copied()) - e).abs() <= 1e-10 * e.max(1.0));
        let back = ifft2c(&k, Provenance::GroundTruth).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).norm() <= 1e-10);
        }
    }

    #[test]
    fn zero_filling_is_idempotent(
        values in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..32),
        pattern in pattern(),
        accel in prop::sample::select(vec![2.0, 4.0, 8.0]),
        seed in any::<u64>(),
    ) {
        let x = image(64, &values);
        let mask = make_mask(pattern, accel, 64, calib_for(pattern), seed).unwrap();
        let y = forward_acquire(&x, &mask, 0.0, 0).unwrap();
        let x_u = zero_fill_recon(&y).unwrap();
        let again = zero_fill_recon(&forward_acquire(&x_u, &mask, 0.0, 0).unwrap()).unwrap();
        for (a, b) in again.data().iter().zip(x_u.data()) {
            prop_assert!((a - b).norm() <= 1e-10);
        }
        // unsampled k-space stays empty
        for (v, &m) in y.data.iter().zip(mask.grid.iter()) {
            prop_assert!(m || v.norm() == 0.0);
        }
    }

    #[test]
    fn masks_hit_their_acceleration_and_keep_the_centre(
        pattern in pattern(),
        accel in prop::sample::select(vec![2.0, 4.0, 8.0, 16.0]),
        seed in any::<u64>(),
    ) {
        let calib = calib_for(pattern);
        let mask = make_mask(pattern, accel, 64, calib, seed).unwrap();
        prop_assert!((mask.achieved_accel() - accel).abs() <= 0.1 * accel, "{}", mask.achieved_accel());
        // the central calibration square is always acquired
        let half = (calib * 64.0).round() as usize / 2;
        for y in 32 - half..32 + half {
            for x in 32 - half..32 + half {
                prop_assert!(mask.grid[(y, x)]);
            }
        }
        prop_assert_eq!(make_mask(pattern, accel, 64, calib, seed).unwrap().grid, mask.grid);
    }

    #[test]
    fn gaussian_kl_matches_the_closed_form_and_is_non_negative(
        params in prop::collection::vec((-3.0f64..3.0, 0.05f64..3.0, -3.0f64..3.0, 0.05f64..3.0), 1..20),
    ) {
        let mq: Vec<f64> = params.iter().map(|p| p.0).collect();
        let sq: Vec<f64> = params.iter().map(|p| p.1).collect();
        let mp: Vec<f64> = params.iter().map(|p| p.2).collect();
        let sp: Vec<f64> = params.iter().map(|p| p.3).collect();
        let expected: f64 = params
            .iter()
            .map(|&(mq, sq, mp, sp)| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
            .sum();
        let kl = gaussian_kl(&mq, &sq, &mp, &sp).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        prop_assert!(gaussian_kl(&mq, &sq, &mq, &sq).unwrap() <= 1e-12);
    }

    #[test]
    fn alpha_weights_grow_fourfold(levels in 1usize..12) {
        let a = alpha_weights(levels).unwrap();
        prop_assert_eq!(a.len(), levels);
        prop_assert_eq!(a[0], 1.0);
        for w in a.windows(2) {
            prop_assert_eq!(w[1], 4.0 * w[0]);
        }
    }

    #[test]
    fn gamma_vanishes_for_identical_members_and_is_non_negative(
        classes in 2usize..5,
        raw in prop::collection::vec(0.0f64..1.0, 8..64),
        other in prop::collection::vec(0.0f64..1.0, 8..64),
        n in 2usize..6,
        hard in any::<bool>(),
    ) {
        let m = prob_map(classes, 4, 4, &raw);
        let same = vec![m.clone(); n];
        // identical samples leave only the entropy of their (shared) mean
        let hardened = gamma_map(&same, true).unwrap();
        prop_assert!(hardened.iter().all(|&g| g <= 1e-7));
        let mixed = vec![m, prob_map(classes, 4, 4, &other)];
        prop_assert!(gamma_map(&mixed, hard).unwrap().iter().all(|&g| g >= 0.0 && g.is_finite()));
    }

    #[test]
    fn similarity_metrics_are_bounded(
        a in prop::collection::vec(0.0f64..1.0, 256),
        b in prop::collection::vec(0.0f64..1.0, 256),
    ) {
        let a = Array2::from_shape_vec((16, 16), a).unwrap();
        let b = Array2::from_shape_vec((16, 16), b).unwrap();
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let s = ssim(&a, &b, 1.0).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        if let Ok(r) = ncc(&a, &b) {
            prop_assert!(r.abs() <= 1.0 + 1e-9);
            prop_assert!((r - ncc(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_statistics_are_consistent(
        values in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..16),
        n in 2usize..6,
    ) {
        let samples: Vec<ComplexImage64> = (0..n)
            .map(|i| {
                let shifted: Vec<(f64, f64)> = values.iter().map(|&(re, im)| (re * (1.0 + i as f64 * 0.1), im)).collect();
                image(8, &shifted)
            })
            .collect();
        let set = ReconstructionSampleSet::from_samples(samples.clone(), "p").unwrap();
        let std = set.std_map.clone().unwrap();
        prop_assert!(std.iter().all(|&s| s >= 0.0));
        prop_assert!(cumulative_variance(&std) >= 0.0);
        let var = set.variance_map().unwrap();
        for (v, s) in var.iter().zip(std.iter()) {
            prop_assert!((v - s * s).abs() <= 1e-12);
        }
        let same = ReconstructionSampleSet::from_samples(vec![samples[0].clone(); n], "p").unwrap();
        prop_assert!(same.std_map.unwrap().iter().all(|&s| s <= 1e-12));
    }
}
