use std::path::PathBuf;

use riskwatch_core::dataset::DatasetError;
use riskwatch_core::estimator::EstimatorError;
use riskwatch_core::evalharness::EvalError;
use riskwatch_core::pipeline::PipelineError;
use riskwatch_core::riskcore::RiskError;
use riskwatch_core::synthgen::SynthError;
use riskwatch_service::error::ServiceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("no episodes in {0}; run generate first")]
    NoEpisodes(PathBuf),
    #[error("no training episodes for skill {0}")]
    NoTrainingEpisodes(String),
    #[error("skill {0} has no episodes in the store")]
    UnknownSkill(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Config { .. } => "config",
            CliError::NoEpisodes(_) => "no_episodes",
            CliError::NoTrainingEpisodes(_) => "no_training_episodes",
            CliError::UnknownSkill(_) => "unknown_skill",
            CliError::Io { .. } => "io",
            CliError::Dataset(_) => "dataset",
            CliError::Estimator(_) => "estimator",
            CliError::Eval(_) => "eval",
            CliError::Pipeline(_) => "pipeline",
            CliError::Risk(_) => "risk",
            CliError::Synth(_) => "synth",
            CliError::Service(_) => "service",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
