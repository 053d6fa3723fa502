use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prototype stage violation: expected {expected}, found {found}")]
    Stage {
        expected: &'static str,
        found: &'static str,
    },

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("empty scene: {0}")]
    EmptyScene(String),

    #[error("insufficient support for class {class}: need {needed} scenes, found {found}")]
    InsufficientSupport {
        class: i64,
        needed: usize,
        found: usize,
    },

    #[error("no query: no eligible query scene remains after support selection")]
    NoQuery,

    #[error("non-deterministic function: two evaluations at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("missing gradients: {0}")]
    MissingGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::EmptyScene(_)
            | Error::InsufficientSupport { .. }
            | Error::NoQuery
            | Error::Checkpoint(_)
            | Error::Io(_) => 3,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::Stage { .. }
            | Error::NonDeterministic { .. }
            | Error::MissingGradient(_)
            | Error::Diverged { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
