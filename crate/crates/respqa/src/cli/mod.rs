//! Operator surface: config-driven commands with deterministic seeds.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_forced_route, cmd_generate, cmd_route_report, cmd_shift_eval, cmd_train,
    generate_predictions, generate_predictions_parallel, load_bundle, parse_taus, path_names,
    TrainOutcome,
};
pub use config::ExperimentConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}
