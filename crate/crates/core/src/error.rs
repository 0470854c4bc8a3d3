use thiserror::Error;

pub type Result<T> = std::result::Result<T, KinkError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinkError {
    #[error("validation error: {0}")]
    Validation(String),

    /// No usable kernel mass (or no full-rank grid point) at a query point.
    #[error("degenerate window at m = {query}: {reason}")]
    DegenerateWindow { query: f64, reason: String },

    #[error("singular fit{}: {context}", fmt_gamma(*.gamma))]
    SingularFit { gamma: Option<f64>, context: String },

    #[error("load error at row {row}, column '{column}': {message}")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn fmt_gamma(gamma: Option<f64>) -> String {
    gamma.map(|g| format!(" at gamma = {g}")).unwrap_or_default()
}

impl KinkError {
    pub fn singular(gamma: Option<f64>, context: impl Into<String>) -> Self {
        KinkError::SingularFit {
            gamma,
            context: context.into(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        KinkError::Validation(msg.into())
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            KinkError::Validation(_)
            | KinkError::MissingColumn(_)
            | KinkError::EmptyDataset(_) => 2,
            KinkError::DegenerateWindow { .. } | KinkError::SingularFit { .. } => 3,
            KinkError::Load { .. } | KinkError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            KinkError::Validation(_) => "validation",
            KinkError::DegenerateWindow { .. } => "degenerate_window",
            KinkError::SingularFit { .. } => "singular_fit",
            KinkError::Load { .. } => "load",
            KinkError::MissingColumn(_) => "missing_column",
            KinkError::EmptyDataset(_) => "empty_dataset",
            KinkError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for KinkError {
    fn from(e: std::io::Error) -> Self {
        KinkError::Io(e.to_string())
    }
}
