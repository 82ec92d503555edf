use std::path::PathBuf;

use gdec_core::Error as CoreError;

/// Errors surfaced by the command-line tool, each with a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 ok, 1 other, 2 protocol, 3 data, 4 degenerate input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::Protocol(_) | CoreError::ContractViolation { .. }) => 2,
            CliError::Core(CoreError::Session(_)) => 2,
            CliError::Core(CoreError::Data(_)) | CliError::Parse { .. } => 3,
            CliError::Core(CoreError::DegenerateFrame) | CliError::Degenerate(_) => 4,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(
            CliError::from(CoreError::Protocol("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::from(CoreError::ContractViolation {
                id: 3,
                detail: "x".into()
            })
            .exit_code(),
            2
        );
        assert_eq!(CliError::from(CoreError::Data("x".into())).exit_code(), 3);
        assert_eq!(CliError::Degenerate("x".into()).exit_code(), 4);
        assert_eq!(CliError::from(CoreError::Config("x".into())).exit_code(), 1);
    }
}
