//! Reconstruction sample sets and the sampler interface shared by every model.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::scalar::Scalar;

/// Default number of samples per test image.
pub const DEFAULT_SAMPLES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionSampleSet<T> {
    pub samples: Vec<ComplexImage<T>>,
    /// Per-pixel mean of the sample magnitudes.
    pub mean_map: Array2<T>,
    /// Per-pixel standard deviation (n - 1 normalization) of the sample magnitudes;
    /// absent for a single sample.
    pub std_map: Option<Array2<T>>,
    pub source: String,
}

impl<T: Scalar> ReconstructionSampleSet<T> {
    pub fn from_samples(samples: Vec<ComplexImage<T>>, source: impl Into<String>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("sample set needs at least one sample".into()))?;
        let dim = first.dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
            return Err(Error::shape(dim, bad.dim()));
        }
        let mags: Vec<Array2<f64>> = samples
            .iter()
            .map(|s| s.magnitude().mapv(|v| v.as_f64()))
            .collect();
        let n = mags.len() as f64;
        let mut mean = Array2::<f64>::zeros(dim);
        for m in &mags {
            mean += m;
        }
        mean /= n;
        let std_map = (mags.len() >= 2).then(|| {
            let mut var = Array2::<f64>::zeros(dim);
            for m in &mags {
                ndarray::Zip::from(&mut var)
                    .and(m)
                    .and(&mean)
                    .for_each(|v, &x, &mu| *v += (x - mu) * (x - mu));
            }
            var.mapv(|v| T::of((v / (n - 1.0)).max(0.0).sqrt()))
        });
        Ok(ReconstructionSampleSet {
            samples,
            mean_map: mean.mapv(T::of),
            std_map,
            source: source.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn variance_map(&self) -> Option<Array2<T>> {
        self.std_map.as_ref().map(|s| s.mapv(|v| v * v))
    }

    /// Keep only the first `n` samples, recomputing statistics.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::from_samples(
            self.samples[..n.min(self.n())].to_vec(),
            self.source.clone(),
        )
    }
}

/// Anything that can draw reconstruction samples for an undersampled image.
pub trait ReconstructionSampler<T: Scalar> {
    fn name(&self) -> String;

    fn sample(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        seed: u64,
    ) -> Result<ReconstructionSampleSet<T>>;

    /// Cheap point estimate used for model selection: the single prediction of a
    /// deterministic model, otherwise the magnitude mean of a few samples.
    fn quick_estimate(&self, x_u: &ComplexImage<T>, seed: u64) -> Result<Array2<T>> {
        Ok(self.sample(x_u, 4, seed)?.mean_map)
    }
}

/// Independent per-item noise seeds derived from one base seed.
pub fn item_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| {
            let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
        .collect()
}
