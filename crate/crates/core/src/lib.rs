//! Probabilistic hierarchical reconstruction of undersampled MRI.
//!
//! The crate bundles a synthetic acquisition pipeline (phantoms, masks, centered
//! orthonormal FFT), a small reverse-mode autodiff engine, the hierarchical latent
//! model and its ELBO objective, uncertainty baselines, a segmenter for propagating
//! sample sets downstream, and the evaluation metrics.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common concrete instantiations.

pub mod acquisition;
pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod hierarchical;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod sampling;
pub mod scalar;
pub mod segmentation;
pub mod tensor;
pub mod train;

pub use baselines::{Baseline, BaselineConfig, BaselineKind, Ensemble, UNetConfig};
pub use error::{Error, Result};
pub use hierarchical::{ModelConfig, Noise, PhiRec};
pub use image::{ComplexImage, Provenance};
pub use sampling::{ReconstructionSampleSet, ReconstructionSampler};
pub use scalar::Scalar;
pub use segmentation::{SegmentationProbMap, Segmenter, SegmenterConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ComplexImage32 = ComplexImage<f32>;
pub type ComplexImage64 = ComplexImage<f64>;
pub type PhiRec32 = PhiRec<f32>;
pub type PhiRec64 = PhiRec<f64>;
pub type SampleSet32 = ReconstructionSampleSet<f32>;
pub type Baseline32 = Baseline<f32>;
pub type Ensemble32 = Ensemble<f32>;
pub type Segmenter32 = Segmenter<f32>;
