use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("non-finite basis value in row {row} (term `{term}`)")]
    NonFiniteBasis { row: usize, term: String },

    #[error("summary/basis mismatch at position {position}: basis term `{expected}` vs summary label `{found}`")]
    SummaryMismatch {
        position: usize,
        expected: String,
        found: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(
        "infeasible calibration: target moments lie outside the convex hull of the source basis"
    )]
    InfeasibleCalibration,

    #[error("ill-conditioned basis: {0}")]
    IllConditioned(String),

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("degenerate balanced covariance")]
    DegenerateBalancedCovariance,

    #[error("initial estimator failed: {0}")]
    InitialEstimatorFailed(String),

    #[error("inner maximization failed: {0}")]
    InnerMaximizationFailed(String),

    #[error("singular variance system (condition estimate {condition:.3e})")]
    SingularVarianceSystem { condition: f64 },

    #[error("degenerate test weighting")]
    DegenerateTestWeighting,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerical solvers as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::InfeasibleCalibration
                | Error::IllConditioned(_)
                | Error::NotConverged(_)
                | Error::DegenerateBalancedCovariance
                | Error::InitialEstimatorFailed(_)
                | Error::InnerMaximizationFailed(_)
                | Error::SingularVarianceSystem { .. }
                | Error::DegenerateTestWeighting
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
