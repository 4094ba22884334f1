//! Reproducible runs over the `refpose` library: every command reads one
//! TOML config, writes its artifacts plus the resolved config and a status
//! record into an output directory, and maps failures to exit codes.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod output;

use refpose::Error;

pub use config::RunConfig;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Output(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                Error::InvalidArgument { .. } => EXIT_CONFIG,
                Error::Schema { .. }
                | Error::VersionMismatch { .. }
                | Error::Corrupt { .. }
                | Error::TensorShape { .. }
                | Error::MissingTensor(_)
                | Error::Data(_)
                | Error::Io { .. } => EXIT_DATA,
                Error::NonFinite { .. } | Error::Diverged { .. } | Error::DegenerateBox { .. } | Error::Shape { .. } => EXIT_NUMERIC,
            },
        }
    }
}
