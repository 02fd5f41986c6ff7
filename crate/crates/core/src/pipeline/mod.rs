//! End-to-end orchestration of the pipeline stages.

pub mod config;
pub mod experiment;
pub mod stages;

pub use config::PipelineConfig;
pub use experiment::{generate, EvalPair, Experiment, GeneratedData};
pub use stages::{run, Command, Manifest, StageOutcome};
