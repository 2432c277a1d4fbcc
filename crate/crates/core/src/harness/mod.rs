//! Experiment configuration and the staged training pipeline.

mod config;
mod pipeline;

pub use config::{ExperimentConfig, Preset};
pub use pipeline::{artifact_root, CurveRow, Experiment, PipelineOutcome, RunOptions, RunState, Stage, ARTIFACTS_ENV};
