//! Experiment orchestration: configuration, seeded end-to-end pipelines,
//! result persistence, and plot-data emission.
//!
//! Every stage writes its artifacts under the configured output directory;
//! `run` chains all of them and finishes with a manifest recording the
//! config hash, seed, and artifact checksums. The whole pipeline is a pure
//! function of (config, seed): two runs produce identical checksums.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use pipeline::{run_pipeline, Manifest};

/// CLI error with process exit-code mapping: 2 config, 3 numeric, 4 stage.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Core(#[from] writesae::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(writesae::Error::Config(_)) => 2,
            CliError::Core(writesae::Error::Numeric(_)) | CliError::Core(writesae::Error::Training { .. }) => 3,
            CliError::Stage { source, .. } => source.exit_code().max(4),
            _ => 4,
        }
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(CliError) -> CliError {
        move |e| CliError::Stage { stage, source: Box::new(e) }
    }
}
