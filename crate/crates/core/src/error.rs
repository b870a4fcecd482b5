use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("factorization failed to converge for {rows}x{cols} matrix after {sweeps} sweeps")]
    Factorization {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error(
        "singular whitening: smallest Gram eigenvalue {smallest:e} is below {threshold:e} \
         (largest {largest:e}); increase the damping lambda"
    )]
    SingularWhitening {
        smallest: f64,
        largest: f64,
        threshold: f64,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("undefined cosine similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Underlying error with any stage tag removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numerical, 3 infeasible budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Shape { .. } => 1,
            Error::Factorization { .. }
            | Error::SingularWhitening { .. }
            | Error::UndefinedCorrelation(_)
            | Error::UndefinedSimilarity(_)
            | Error::DegenerateSpectrum(_) => 2,
            Error::Infeasible(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
