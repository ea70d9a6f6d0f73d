use thiserror::Error;

pub type Result<T> = std::result::Result<T, QsdError>;

#[derive(Debug, Error)]
pub enum QsdError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("state is not normalized: |a0|^2 + |a1|^2 = {norm_sqr}")]
    NotNormalized { norm_sqr: f64 },

    #[error("matrix is not unitary: max |U^dagger U - I| entry = {defect:e}")]
    NotUnitary { defect: f64 },

    #[error("matrix is singular (|det| = {det:e}); no unitary polar factor")]
    SingularMatrix { det: f64 },

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("invalid extraction schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),

    #[error("distribution has zero extracted probability in the retained bins")]
    DegenerateDistribution,

    #[error("expected an ensemble of {expected} states, got {actual}")]
    Arity { expected: usize, actual: usize },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("invalid outcome table: {0}")]
    InvalidTable(String),

    #[error("invalid count vector: {0}")]
    InvalidCounts(String),

    #[error("all hypotheses assign zero likelihood to the observed counts")]
    ContradictoryEvidence,

    #[error(
        "exact enumeration needs {required} count vectors (limit {limit}); use montecarlo mode"
    )]
    Capacity { required: u128, limit: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no records have a total count within {lower}..={upper}")]
    NoEventsInWindow { lower: f64, upper: f64 },

    #[error("no {0} supplied")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
