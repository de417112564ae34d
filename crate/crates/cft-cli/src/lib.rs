//! Command-line front end for the counterfactual fine-tuning laboratory:
//! dataset generation, training, decoding, evaluation, exposure analysis,
//! and hyperparameter sweeps. The binary in `main.rs` is a thin wrapper so
//! every command stays callable (and testable) in-process.

use cft_core::trainer::TrainError;

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod svg;

/// User-facing failure, bucketed by exit code: bad settings (2), bad or
/// missing inputs (3), numeric blow-ups during training (4).
#[derive(Debug)]
pub enum AppError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(msg) | AppError::Data(msg) | AppError::Numeric(msg) => {
                f.write_str(msg)
            }
        }
    }
}

impl std::error::Error for AppError {}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => AppError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteValidation { .. } => {
                AppError::Numeric(e.to_string())
            }
            other => AppError::Data(other.to_string()),
        }
    }
}
