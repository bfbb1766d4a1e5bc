use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI run, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// The config file is missing, malformed or inconsistent.
    #[error("{0}")]
    Config(String),

    /// An input or output file could not be read or written.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Library(#[from] baryflow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Library(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    /// Machine-parsable tag printed as `error[tag]:`.
    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Library(e) if e.is_numerical() => "numerical",
            CliError::Library(_) => "input",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_errors_exit_with_two() {
        let e = CliError::from(baryflow::Error::Numerical("nan".into()));
        assert_eq!((e.exit_code(), e.tag()), (2, "numerical"));
        let e = CliError::from(baryflow::Error::Validation("bad".into()));
        assert_eq!((e.exit_code(), e.tag()), (1, "input"));
        assert_eq!(CliError::config("x").exit_code(), 1);
    }
}
