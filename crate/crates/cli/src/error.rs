use std::path::PathBuf;

/// Errors surfaced by the commands, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] condmmd::Error),

    #[error("invalid config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("cannot load model {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: condmmd::Error,
    },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} check(s) failed: {}", .0.len(), .0.join(", "))]
    ChecksFailed(Vec<String>),
}

impl CliError {
    /// 1 for failed checks, 3 for numeric failures, 2 for everything the
    /// user can fix by changing inputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Core(condmmd::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::ChecksFailed(vec!["a".into()]).exit_code(), 1);
        assert_eq!(CliError::Core(condmmd::Error::Numeric("nan".into())).exit_code(), 3);
        assert_eq!(CliError::Core(condmmd::Error::Config("bad".into())).exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    }
}
