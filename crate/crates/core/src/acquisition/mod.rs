//! Synthetic phantoms and the single-coil k-space acquisition model.

pub mod dataset;
pub mod fft;
pub mod forward;
pub mod mask;
pub mod phantom;

pub use dataset::{
    build_dataset, load_dataset, write_dataset, Dataset, DatasetConfig, Sample, Split, SplitSpec,
};
pub use fft::{fft2c, fftshift, ifft2c};
pub use forward::{forward_acquire, zero_fill_recon, KSpaceSample};
pub use mask::{make_mask, MaskPattern, UndersamplingMask};
pub use phantom::{generate_phantom, Ellipse, Phantom, PhantomConfig};
