use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("particle counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),

    #[error("empty measure")]
    EmptyMeasure,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("time grids differ: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {0} is not a grid node")]
    OffGrid(f64),

    #[error("particle blow-up at t = {t}: max |x| = {max_abs:e}")]
    BlowUp { t: f64, max_abs: f64 },

    #[error("no convergence after {0} iterations")]
    MaxIterations(usize),

    #[error("matrix not invertible at node {node}: {what}")]
    Singular { node: usize, what: String },

    #[error("numerical breakdown at node {node}: {what}")]
    Breakdown { node: usize, what: String },

    #[error("explicit drift step violates monotonicity: need dt <= {required:e}, have {actual:e}")]
    Monotonicity { required: f64, actual: f64 },

    #[error("diffusion vanishes at t = {t}, x = {x}; route degenerate problems through the LQ solver")]
    DegenerateDiffusion { t: f64, x: f64 },

    #[error("coefficients depend on the evaluation time: {0}")]
    TauDependent(String),

    #[error("backend does not match the problem: {0}")]
    BackendMismatch(String),

    #[error("too few iterations: {0}")]
    TooFewIterations(usize),

    #[error("probe rejected: {0}")]
    Probe(String),

    #[error("thread pool: {0}")]
    ThreadPool(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
