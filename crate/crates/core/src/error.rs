use thiserror::Error;

/// Errors raised across the library. The CLI maps each variant onto a stable
/// process exit code via [`LrcovError::exit_code`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LrcovError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("kernel specification error: {0}")]
    KernelSpec(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("eigenvalue separation violated at level {level}: gap {gap:e} below tolerance {tolerance:e}")]
    Separation { level: usize, gap: f64, tolerance: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at row {row}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        row: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("replication {replication}: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<LrcovError>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl LrcovError {
    /// 0 success, 2 data parse, 3 config, 4 numeric contract, 5 statistical precondition.
    pub fn exit_code(&self) -> i32 {
        match self {
            LrcovError::Parse { .. } | LrcovError::Io(_) => 2,
            LrcovError::Config(_) | LrcovError::Unsupported(_) => 3,
            LrcovError::Separation { .. } => 5,
            LrcovError::Replication { source, .. } => match source.exit_code() {
                5 => 5,
                _ => 4,
            },
            LrcovError::Dimension { .. }
            | LrcovError::Input(_)
            | LrcovError::KernelSpec(_)
            | LrcovError::Contract(_) => 4,
        }
    }
}

impl From<std::io::Error> for LrcovError {
    fn from(e: std::io::Error) -> Self {
        LrcovError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LrcovError>;
