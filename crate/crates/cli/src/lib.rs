//! Benchmark driver: `generate`, `train`, `evaluate`, `bounds`, `diagnose`.
//!
//! Each subcommand reads one TOML [`config::Config`] and writes its outputs
//! under `out_dir`. All outputs are deterministic functions of the config.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_bounds, cmd_diagnose, cmd_evaluate, cmd_generate, cmd_train, OutPaths};
pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing input {path}: {reason}")]
    MissingInput { path: String, reason: String },

    #[error(transparent)]
    Core(#[from] drws::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
