use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] phirec_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Collision(PathBuf),

    #[error("run directory {} is locked by another process ({})", .path.display(), .holder)]
    Locked { path: PathBuf, holder: String },

    #[error("missing input {}: {detail}", .path.display())]
    Missing { path: PathBuf, detail: String },

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn missing(path: &Path, detail: impl Into<String>) -> Self {
        LabError::Missing {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
