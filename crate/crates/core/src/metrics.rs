//! Reconstruction quality and uncertainty calibration metrics.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    Ok(())
}

pub fn squared_error_map<T: Scalar>(pred: &Array2<T>, gt: &Array2<T>) -> Result<Array2<T>> {
    same_shape(pred, gt)?;
    Ok(ndarray::Zip::from(pred)
        .and(gt)
        .map_collect(|&p, &g| (p - g) * (p - g)))
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering restricted to windows fully inside the grid.
fn filter_valid(a: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            rows[(y, x)] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * a[(y, x + i)])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            out[(y, x)] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i, x)])
                .sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (σ = 1.5, K1 = 0.01, K2 = 0.03).
pub fn ssim<T: Scalar>(a: &Array2<T>, b: &Array2<T>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "grid {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let a = a.mapv(|v| v.as_f64());
    let b = b.mapv(|v| v.as_f64());
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let aa = filter_valid(&(&a * &a), &taps);
    let bb = filter_valid(&(&b * &b), &taps);
    let ab = filter_valid(&(&a * &b), &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for (((&ma, &mb), (&saa, &sbb)), &sab) in
        mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab)
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// `10 log10(range² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Array2<T>, b: &Array2<T>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Zero-normalized cross correlation with population standard deviations.
pub fn ncc<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len() as f64;
    let mean = |g: &Array2<T>| g.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    // relative guard: constant grids leave only rounding residue
    let tiny = |v: f64, m: f64| v <= 1e-24 * n * (1.0 + m * m);
    if tiny(va, ma) || tiny(vb, mb) {
        return Err(Error::UndefinedCorrelation(
            "input has zero variance".into(),
        ));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// NCC of `a` against a seeded random permutation of `b`: the chance level.
pub fn permutation_null_ncc<T: Scalar>(a: &Array2<T>, b: &Array2<T>, seed: u64) -> Result<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut vals: Vec<T> = b.iter().copied().collect();
    vals.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let shuffled = Array2::from_shape_vec(b.dim(), vals).expect("same element count");
    ncc(a, &shuffled)
}

/// `Σ std²` over all pixels.
pub fn cumulative_variance<T: Scalar>(std_map: &Array2<T>) -> f64 {
    std_map.iter().map(|s| s.as_f64().powi(2)).sum()
}

/// Cumulative variance per acceleration relative to the reference acceleration.
pub fn relative_recon_variance<T: Scalar>(
    std_maps: &[(f64, Array2<T>)],
    reference_accel: f64,
) -> Result<Vec<(f64, f64)>> {
    let reference = std_maps
        .iter()
        .find(|(a, _)| *a == reference_accel)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("reference acceleration {reference_accel} missing"))
        })?;
    let base = cumulative_variance(&reference.1);
    if base == 0.0 {
        return Err(Error::InvalidArgument("reference variance is zero".into()));
    }
    Ok(std_maps
        .iter()
        .map(|(a, m)| {
            let r = if *a == reference_accel {
                1.0
            } else {
                cumulative_variance(m) / base
            };
            (*a, r)
        })
        .collect())
}
