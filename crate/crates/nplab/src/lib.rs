// SPDX-License-Identifier: Apache-2.0

//! Experiment runner behind the `nplab` binary.

pub mod checks;
pub mod cli;
pub mod cmd;
pub mod experiments;
pub mod io;

use npcore::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    /// No positive NCF, or no step size that decreases the loss.
    #[error("stalled: {0}")]
    Stall(String),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Stall(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Shape(_) | Error::Invalid(_) | Error::UnknownTask(_) | Error::SingularValueTie { .. } => {
                CliError::Config(msg)
            }
            Error::NoPositiveKkt { .. } | Error::DeltaExhausted { .. } | Error::RemainderZero | Error::ZeroVector => {
                CliError::Stall(msg)
            }
            Error::NonFinite(_) | Error::NotStationary { .. } => CliError::Numerical(msg),
        }
    }
}
