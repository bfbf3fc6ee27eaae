use std::path::PathBuf;

use annostance::annotate::{AnnotateError, BackendError};
use annostance::corpus::CorpusError;
use annostance::metrics::MetricsError;
use annostance::multitarget::SamplerError;
use annostance::prompt::PromptError;
use annostance::student::StudentError;

/// Error families, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing upstream artifact {path}; run `{producer}` first")]
    MissingUpstream { path: PathBuf, producer: &'static str },
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("backend: {0}")]
    Backend(String),
    #[error("training: {0}")]
    Training(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingUpstream { .. } => 3,
            CliError::Corpus(_) => 4,
            CliError::Backend(_) => 5,
            CliError::Training(_) => 6,
            CliError::Io { .. } => 7,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io("writing output", e)
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Io(source) => CliError::io("annotation", source),
            AnnotateError::Prompt { .. } => CliError::Config(e.to_string()),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(m) => CliError::Config(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Annotate(a) => a.into(),
            SamplerError::Io(source) => CliError::io("multi-target sampling", source),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<StudentError> for CliError {
    fn from(e: StudentError) -> Self {
        match e {
            StudentError::Io(source) => CliError::io("student", source),
            other => CliError::Training(other.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Training(e.to_string())
    }
}
