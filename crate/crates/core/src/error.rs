use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Cholesky factorization failed even after the full jitter escalation.
    /// `jitter_trail` lists every jitter value that was tried.
    #[error("numerical failure in {context}: factorization failed (jitter trail: {jitter_trail:?})")]
    Factorization {
        context: &'static str,
        jitter_trail: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// An error raised while running one stage of an experiment.
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<GpError>,
    },
}

impl GpError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GpError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        GpError::InvalidArgument(message.into())
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), GpError::Factorization { .. } | GpError::Numerical(_))
    }

    /// The underlying error with stage wrappers removed.
    pub fn root(&self) -> &GpError {
        match self {
            GpError::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        GpError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 for configuration and argument errors, 2 for
    /// numerical failures, 3 for I/O and data-format errors.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            GpError::Factorization { .. } | GpError::Numerical(_) => 2,
            GpError::Io(_) | GpError::Csv(_) | GpError::Json(_) | GpError::Parse { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GpError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
