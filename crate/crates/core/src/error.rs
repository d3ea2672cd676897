use thiserror::Error;

pub type Result<T, E = EsrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EsrfError {
    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} below -{tolerance:e}")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("quadrature under-resolved: truncation estimate {estimate:e} exceeds {tolerance:e}")]
    QuadratureUnderResolved { estimate: f64, tolerance: f64 },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("invalid step size {0}")]
    InvalidStep(f64),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("degenerate rate fit: {0}")]
    DegenerateFit(String),

    #[error("unsupported test function: {0}")]
    UnsupportedTestFunction(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<EsrfError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EsrfError {
    pub fn context(self, context: impl Into<String>) -> Self {
        EsrfError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
