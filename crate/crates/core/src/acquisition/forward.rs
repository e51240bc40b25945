use ndarray::Array2;
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::fft::{fft2c, ifft2c};
use super::mask::UndersamplingMask;
use crate::error::{Error, Result};
use crate::image::{ComplexImage, Provenance};
use crate::scalar::Scalar;

/// Measured k-space: exactly zero wherever the mask is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSample<T> {
    pub data: Array2<Complex<T>>,
    pub mask: UndersamplingMask,
    pub noise_sigma: f64,
}

/// Single-coil acquisition `y = M (F x + η)` with complex Gaussian noise drawn
/// only at sampled locations.
pub fn forward_acquire<T: Scalar>(
    x: &ComplexImage<T>,
    mask: &UndersamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<KSpaceSample<T>> {
    if x.dim() != mask.dim() {
        return Err(Error::shape(mask.dim(), x.dim()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let mut k = fft2c(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (v, &m) in k.iter_mut().zip(mask.grid.iter()) {
        if !m {
            *v = Complex::new(T::zero(), T::zero());
        } else if noise_sigma > 0.0 {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v = *v + Complex::new(T::of(re * noise_sigma), T::of(im * noise_sigma));
        }
    }
    Ok(KSpaceSample {
        data: k,
        mask: mask.clone(),
        noise_sigma,
    })
}

pub fn zero_fill_recon<T: Scalar>(y: &KSpaceSample<T>) -> Result<ComplexImage<T>> {
    ifft2c(&y.data, Provenance::ZeroFilled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::mask::{make_mask, MaskPattern};
    use crate::acquisition::phantom::{generate_phantom, PhantomConfig};
    use crate::metrics::ssim;

    fn phantom_image() -> ComplexImage<f64> {
        let p = generate_phantom(1, &PhantomConfig::default()).unwrap();
        ComplexImage::from_real(&p.image, Provenance::GroundTruth).unwrap()
    }

    fn max_diff(a: &ComplexImage<f64>, b: &ComplexImage<f64>) -> f64 {
        (a.data() - b.data())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn noiseless_full_mask_is_identity() {
        let x = phantom_image();
        let mask = UndersamplingMask::fully_sampled(64, MaskPattern::PoissonDisc, 0);
        let y = forward_acquire(&x, &mask, 0.0, 0).unwrap();
        assert_eq!(y.data, fft2c(&x));
        let xu = zero_fill_recon(&y).unwrap();
        assert!(max_diff(&xu, &x) < 1e-10);
        assert_eq!(xu.meta, Provenance::ZeroFilled);
    }

    #[test]
    fn zero_fill_is_idempotent_projection() {
        let x = phantom_image();
        let mask = make_mask(MaskPattern::PoissonDisc, 4.0, 64, 0.08, 3).unwrap();
        let once = zero_fill_recon(&forward_acquire(&x, &mask, 0.0, 0).unwrap()).unwrap();
        let twice = zero_fill_recon(&forward_acquire(&once, &mask, 0.0, 0).unwrap()).unwrap();
        assert!(max_diff(&once, &twice) < 1e-10);
    }

    #[test]
    fn unsampled_entries_are_exactly_zero_under_noise() {
        let x = phantom_image();
        let mask = make_mask(MaskPattern::CartesianRandom, 4.0, 64, 0.08, 1).unwrap();
        let y = forward_acquire(&x, &mask, 0.01, 42).unwrap();
        for (v, &m) in y.data.iter().zip(mask.grid.iter()) {
            if !m {
                assert_eq!(*v, Complex::new(0.0, 0.0));
            }
        }
        assert_eq!(y, forward_acquire(&x, &mask, 0.01, 42).unwrap());
    }

    #[test]
    fn equispaced_2x_ghost_at_half_fov() {
        let mut img = Array2::<f64>::zeros((64, 64));
        img[(10, 20)] = 1.0;
        let x = ComplexImage::from_real(&img, Provenance::GroundTruth).unwrap();
        let mask = make_mask(MaskPattern::Equispaced, 2.0, 64, 0.0, 0).unwrap();
        let xu = zero_fill_recon(&forward_acquire(&x, &mask, 0.0, 0).unwrap()).unwrap();
        let mag = xu.magnitude();
        assert!((mag[(10, 20)] - 0.5).abs() < 1e-10);
        assert!((mag[(42, 20)] - 0.5).abs() < 1e-10);
        let rest: f64 = mag.sum() - mag[(10, 20)] - mag[(42, 20)];
        assert!(rest.abs() < 1e-9);
    }

    #[test]
    fn poisson_4x_loses_information() {
        let x = phantom_image();
        let mask = make_mask(MaskPattern::PoissonDisc, 4.0, 64, 0.08, 3).unwrap();
        let xu = zero_fill_recon(&forward_acquire(&x, &mask, 0.0, 0).unwrap()).unwrap();
        let s = ssim(&xu.magnitude(), &x.magnitude(), 1.0).unwrap();
        assert!(s < 1.0, "{s}");
    }

    #[test]
    fn noisy_acquisition_regression() {
        let x = phantom_image().cast::<f32>();
        let mask = make_mask(MaskPattern::PoissonDisc, 4.0, 64, 0.08, 3).unwrap();
        let y = forward_acquire(&x, &mask, 0.01, 5).unwrap();
        let digest = crate::io::digest_f32(y.data.iter().flat_map(|c| [c.re, c.im]));
        println!("noisy acquisition digest {digest}");
        assert_eq!(digest, NOISY_DIGEST);
    }

    const NOISY_DIGEST: &str = "9a0c0deab5bb14898cf5d0ac6ad7d18f1838f8b6873aee19c3e5f6b55ffdbc62";
}
