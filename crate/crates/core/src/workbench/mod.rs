//! Run configuration, synthetic surrogates and the staged pipeline.

pub mod config;
pub mod pipeline;
pub mod synth;

use thiserror::Error;

pub use config::{ConfigFile, RunConfig, SEED_ENV};
pub use pipeline::{run_pipeline, Stage};
pub use synth::{parse_manifest, synth_gaze, synth_images, SynthImage, SyntheticSpec};

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error at {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(String),
    #[error("{0}")]
    Runtime(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<WorkbenchError> },
}

impl WorkbenchError {
    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkbenchError::Config(_) | WorkbenchError::Input(_) | WorkbenchError::Exists(_) => 1,
            WorkbenchError::Io { .. } | WorkbenchError::Runtime(_) => 2,
            WorkbenchError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WorkbenchError::Config(_) => "config",
            WorkbenchError::Input(_) => "input",
            WorkbenchError::Io { .. } => "io",
            WorkbenchError::Exists(_) => "exists",
            WorkbenchError::Runtime(_) => "runtime",
            WorkbenchError::Stage { source, .. } => source.kind(),
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            WorkbenchError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
