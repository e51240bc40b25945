//! Centered, orthonormal 2D Fourier transforms.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::Result;
use crate::image::{check_pow2, ComplexImage, Provenance};
use crate::scalar::Scalar;

/// Circular shift by half the extent in both axes; its own inverse for even dims.
pub fn fftshift<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[((y + h / 2) % h, (x + w / 2) % w)])
}

fn fft2_inplace<T: Scalar>(a: &mut Array2<Complex<T>>, dir: FftDirection) {
    let (h, w) = a.dim();
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, dir);
    let col_fft = planner.plan_fft(h, dir);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); w.max(h)];
    for mut row in a.rows_mut() {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = *v;
        }
        row_fft.process(&mut buf[..w]);
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
    for mut col in a.columns_mut() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = *v;
        }
        col_fft.process(&mut buf[..h]);
        for (v, b) in col.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
    let scale = T::one() / T::of((h * w) as f64).sqrt();
    a.mapv_inplace(|c| c * scale);
}

/// Image to k-space with the DC component at `(H/2, W/2)`.
pub fn fft2c<T: Scalar>(x: &ComplexImage<T>) -> Array2<Complex<T>> {
    let mut a = fftshift(x.data());
    fft2_inplace(&mut a, FftDirection::Forward);
    fftshift(&a)
}

/// Inverse of [`fft2c`].
pub fn ifft2c<T: Scalar>(k: &Array2<Complex<T>>, meta: Provenance) -> Result<ComplexImage<T>> {
    let (h, w) = k.dim();
    check_pow2(h, w)?;
    let mut a = fftshift(k);
    fft2_inplace(&mut a, FftDirection::Inverse);
    ComplexImage::new(fftshift(&a), meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((h, w), |_| {
            Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexImage::new(data, Provenance::GroundTruth).unwrap()
    }

    fn norm(a: &Array2<Complex<f64>>) -> f64 {
        a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn roundtrip_and_parseval_across_sizes() {
        for (i, size) in [32usize, 64, 128, 256].into_iter().enumerate() {
            let x = random_image(size, size, i as u64);
            let k = fft2c(&x);
            assert!((norm(x.data()) - norm(&k)).abs() < 1e-10);
            let back = ifft2c(&k, Provenance::Sample).unwrap();
            let err = (back.data() - x.data())
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "size {size}: {err}");
        }
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.75;
        let x = ComplexImage::from_real(&Array2::from_elem((32, 64), c), Provenance::GroundTruth)
            .unwrap();
        let k = fft2c(&x);
        let expected = c * ((32 * 64) as f64).sqrt();
        for ((y, xx), v) in k.indexed_iter() {
            if (y, xx) == (16, 32) {
                assert!((v.re - expected).abs() < 1e-10 && v.im.abs() < 1e-10);
            } else {
                assert!(v.norm() < 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_equals_inverse() {
        let x = random_image(32, 32, 9);
        let y = random_image(32, 32, 10);
        let fx = fft2c(&x);
        let finv_y = ifft2c(y.data(), Provenance::Sample).unwrap();
        let lhs: Complex<f64> = fx.iter().zip(y.data()).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex<f64> = x
            .data()
            .iter()
            .zip(finv_y.data())
            .map(|(a, b)| a * b.conj())
            .sum();
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn non_power_of_two_rejected() {
        let k = Array2::from_elem((24, 32), Complex::new(0.0f64, 0.0));
        assert!(ifft2c(&k, Provenance::Sample).is_err());
    }
}
