//! Pipeline orchestration behind the `polylens` binary.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::PipelineConfig;
pub use error::MissingArtifact;
pub use stages::{ingest_conllu, run_stage, STAGES};
