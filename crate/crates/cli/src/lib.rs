//! Experiment runner behind the `pcn` binary.
//!
//! Each subcommand is a plain function taking a resolved
//! [`ExperimentConfig`] and a [`RunDir`], so the whole pipeline can be driven
//! from tests without spawning processes.

use std::fmt;

pub mod commands;
pub mod config;
pub mod rundir;

pub use config::ExperimentConfig;
pub use rundir::RunDir;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// An error on its way to becoming a process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

impl From<pcn::Error> for Failure {
    fn from(e: pcn::Error) -> Self {
        use pcn::Error as E;
        let code = match e {
            E::Config(_) | E::Contract(_) => EXIT_CONFIG,
            E::Numeric(_) | E::Normalization(_) => EXIT_NUMERIC,
            E::Dimension(_) | E::Label(_) | E::Sampling(_) | E::Generation(_) | E::Format { .. } | E::Io { .. } => EXIT_DATA,
        };
        Self { code, msg: e.to_string() }
    }
}
