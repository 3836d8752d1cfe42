use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("feature width must be at least 1")]
    InvalidWidth,

    #[error("input dimension must be at least 1")]
    InvalidDim,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("linear system is numerically singular")]
    SingularSystem,

    #[error("invalid smoothness or rate parameter: {0}")]
    InvalidRate(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },

    #[error("incompatible scenario: {0}")]
    IncompatibleScenario(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("degenerate variance fit: {0}")]
    DegenerateFit(String),

    #[error("timing measurements unstable: {0}")]
    TimingUnstable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("artifact not found: {0}")]
    ArtifactNotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code classification used by the command-line front end.
    /// 2 = configuration, 3 = data, 4 = numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::InvalidRate(_)
            | Error::InvalidWidth
            | Error::InvalidDim
            | Error::IncompatibleScenario(_) => 2,
            Error::Io(_)
            | Error::Parse { .. }
            | Error::TooFewSamples { .. }
            | Error::ArtifactNotFound(_) => 3,
            Error::DimMismatch(_)
            | Error::NonFiniteInput(_)
            | Error::SingularSystem
            | Error::DivergenceDetected { .. }
            | Error::DegenerateFit(_)
            | Error::TimingUnstable(_) => 4,
        }
    }
}
