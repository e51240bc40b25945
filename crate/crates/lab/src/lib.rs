//! Desk-scale experiment harness around `phirec-core`: configuration, run
//! directories with provenance manifests, the experiment stages and figures.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod render;
pub mod report;

pub use config::{ExperimentConfig, ModelKind, Setting};
pub use error::{LabError, Result};
pub use manifest::{RunLock, RunManifest};
pub use pipeline::{LoadedModel, Run, TrainSummary};
