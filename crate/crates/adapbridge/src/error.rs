use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Everything that can fail at a public boundary funnels through here so
/// callers (CLI, examples, tests) handle one type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received operands whose shapes do not combine.
    /// Both shapes are reported to make mismatches diagnosable from logs.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated a documented precondition.
    #[error("contract violation in {context}: {message}")]
    Contract {
        context: &'static str,
        message: String,
    },

    /// Configuration failed validation (bad hyperparameter, unknown key, bad value).
    #[error("invalid config: {0}")]
    Config(String),

    /// A corpus file line could not be parsed.
    #[error("corpus parse error at line {line}: {message}")]
    CorpusParse { line: usize, message: String },

    /// Token ids that do not fit the active vocabulary, or a checkpoint whose
    /// embedded vocabulary disagrees with the corpus in use.
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    /// A checkpoint file is malformed or has an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; diagnostics identify the step.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {message}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(context: &'static str, message: impl Into<String>) -> Error {
        Error::Contract {
            context,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
