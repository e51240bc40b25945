//! Random multi-class ellipse phantoms with paired label maps.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Normalized `(x, y)` in `[-1, 1]`.
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub intensity: f64,
    pub class_id: u8,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let a = (c * du + s * dv) / self.semi_axes.0;
        let b = (-s * du + c * dv) / self.semi_axes.1;
        a * a + b * b <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Array2<f64>,
    pub labels: Array2<u8>,
    pub seed: u64,
    pub structures: Vec<Ellipse>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_classes: usize,
    /// Inclusive range of ellipse counts, the enclosing body ellipse included.
    pub n_ellipses: (usize, usize),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            n_classes: 5,
            n_ellipses: (4, 8),
        }
    }
}

/// Mean intensity of a class; classes are spaced evenly over `[0.2, 1.0]`.
pub fn class_intensity(class_id: u8, n_classes: usize) -> f64 {
    if n_classes <= 2 {
        return 0.8;
    }
    0.2 + 0.8 * (class_id as f64 - 1.0) / (n_classes as f64 - 2.0)
}

fn pixel_center(i: usize, size: usize) -> f64 {
    (i as f64 + 0.5) / size as f64 * 2.0 - 1.0
}

pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<Phantom> {
    let PhantomConfig {
        size,
        n_classes,
        n_ellipses: (lo, hi),
    } = *config;
    if !size.is_power_of_two() || size < 32 {
        return Err(Error::InvalidConfig(format!(
            "phantom size must be a power of two >= 32, got {size}"
        )));
    }
    if n_classes < 2 || n_classes > u8::MAX as usize {
        return Err(Error::InvalidConfig(format!(
            "n_classes must be in 2..=255, got {n_classes}"
        )));
    }
    if lo < 1 || lo > hi {
        return Err(Error::InvalidConfig(format!(
            "invalid ellipse count range {lo}..={hi}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(lo..=hi);
    let mut structures = Vec::with_capacity(count);
    let jitter = |rng: &mut ChaCha8Rng, class_id: u8| {
        (class_intensity(class_id, n_classes) + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
    };

    // enclosing body
    structures.push(Ellipse {
        center: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        semi_axes: (rng.random_range(0.6..0.85), rng.random_range(0.6..0.85)),
        rotation: rng.random_range(0.0..std::f64::consts::PI),
        intensity: jitter(&mut rng, 1),
        class_id: 1,
    });
    for _ in 1..count {
        let class_id = rng.random_range(1..n_classes) as u8;
        let r = rng.random_range(0.0..0.45);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        structures.push(Ellipse {
            center: (r * phi.cos(), r * phi.sin()),
            semi_axes: (rng.random_range(0.08..0.3), rng.random_range(0.08..0.3)),
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            intensity: jitter(&mut rng, class_id),
            class_id,
        });
    }

    let mut image = Array2::zeros((size, size));
    let mut labels = Array2::zeros((size, size));
    for e in &structures {
        for y in 0..size {
            let v = pixel_center(y, size);
            for x in 0..size {
                if e.contains(pixel_center(x, size), v) {
                    image[(y, x)] = e.intensity;
                    labels[(y, x)] = e.class_id;
                }
            }
        }
    }
    Ok(Phantom {
        image,
        labels,
        seed,
        structures,
    })
}
