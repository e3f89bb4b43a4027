use thiserror::Error;

/// Errors raised across the quadrature toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point has no coordinates")]
    EmptyPoint,

    #[error("non-finite coordinate at position {0}")]
    NonFiniteCoordinate(usize),

    #[error("RBF bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("feature vector has zero norm; cosine similarity is undefined")]
    ZeroNormFeature,

    #[error("invalid precomputed kernel: {0}")]
    InvalidGram(String),

    #[error("point does not name a valid row of the precomputed kernel: {0}")]
    InvalidIndex(String),

    #[error("kernel is not standardized: k(x,x) deviates from 1")]
    NotStandardized,

    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),

    #[error("covariance matrix is not symmetric positive definite")]
    NonSpdCovariance,

    #[error("Gaussian mixture closed forms require an RBF kernel")]
    UnsupportedCombination,

    #[error("sample count must be at least 1")]
    NoSamples,

    #[error("pool is empty")]
    EmptyPool,

    #[error("candidate pool points have inconsistent dimensions")]
    InconsistentPool,

    #[error("pool id {0} is already an atom")]
    DuplicateAtom(usize),

    #[error("atom {id} lies numerically in the span of the selected atoms (Schur complement {schur:e})")]
    NearDependentAtom { id: usize, schur: f64 },

    #[error("every remaining candidate is numerically dependent on the selected atoms")]
    AllDependent,

    #[error("iteration budget must be at least 1")]
    ZeroBudget,

    #[error("method {0} is not supported here")]
    UnsupportedMethod(String),

    #[error("cannot split a pool of {pool} points across {workers} workers")]
    PoolSmallerThanWorkers { pool: usize, workers: usize },

    #[error("rate fit needs at least 3 points above the floor, got {0}")]
    InsufficientPoints(usize),

    #[error("exhaustive search would examine {0} subsets, above the budget of 1e6")]
    CombinatorialBudgetExceeded(u128),

    #[error("logistic regression needs both classes present")]
    BothClassesRequired,

    #[error("logistic regression needs at least 2 examples")]
    TooFewExamples,

    #[error("Fisher embedding is the zero vector")]
    DegenerateEmbedding,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
