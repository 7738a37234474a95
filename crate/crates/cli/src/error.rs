use std::path::{Path, PathBuf};

use synthembed::embedder::EmbedError;
use synthembed::eval::EvalError;
use synthembed::gateway::GatewayError;
use synthembed::import::ImportError;
use synthembed::influence::InfluenceError;
use synthembed::model::DataError;
use synthembed::synth::SynthError;
use synthembed::trainer::TrainError;
use thiserror::Error;

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    /// An invariant or assertion did not hold.
    Invariant = 1,
    /// Filesystem, environment or gateway trouble.
    Environment = 2,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invariant(String),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("environment: {0}")]
    Env(String),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Invariant(_) => ExitCode::Invariant,
            CliError::File { .. } | CliError::Env(_) | CliError::Gateway(_) => ExitCode::Environment,
        }
    }

    pub fn file(path: &Path, reason: impl ToString) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub fn invariant(reason: impl ToString) -> Self {
        CliError::Invariant(reason.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Gateway(g) => CliError::Gateway(g),
            SynthError::Template { path, reason } => CliError::File {
                path,
                reason,
            },
            other => CliError::invariant(other),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::file(&path, source),
            other => CliError::invariant(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::File { path, reason } => CliError::File { path, reason },
            other => CliError::invariant(other),
        }
    }
}

impl From<InfluenceError> for CliError {
    fn from(e: InfluenceError) -> Self {
        match e {
            InfluenceError::Registry { path, reason } => CliError::File { path, reason },
            other => CliError::invariant(other),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Checkpoint { path, reason } => CliError::File {
                path: path.into(),
                reason,
            },
            other => CliError::invariant(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::invariant(e)
    }
}

impl From<ImportError> for CliError {
    fn from(e: ImportError) -> Self {
        match e {
            ImportError::Io { path, reason } => CliError::File { path, reason },
            ImportError::NoFiles(path) => CliError::file(&path, "no JSONL files found"),
        }
    }
}
