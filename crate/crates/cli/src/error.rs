//! Command errors and their exit codes.

use std::path::PathBuf;

use thiserror::Error;
use volex_core::VolexError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] VolexError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(VolexError::Io(_) | VolexError::Csv(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "numerical",
            _ => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(VolexError::InvalidParameter("x".into())).exit_code(), 2);
        let solver = VolexError::Solver {
            step: 3,
            t: 0.5,
            reason: "x".into(),
        };
        assert_eq!(CliError::from(solver).exit_code(), 3);
        let io = std::io::Error::other("x");
        assert_eq!(CliError::io("a", io).exit_code(), 1);
    }
}
