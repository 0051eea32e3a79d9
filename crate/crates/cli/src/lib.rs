//! Batch driver: configuration, the solve / consistency / spike pipeline and
//! the result bundle.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod config;
pub mod pipeline;

pub use bundle::{Bundle, FileEntry};
pub use config::{Checks, ModelSection, Numerics, Output, ResolvedModel, RunConfig};
pub use pipeline::{run, verify_bundle, RunOptions, RunOutcome, Summary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Solver(tic_mkv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Solver(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<tic_mkv::Error> for CliError {
    fn from(e: tic_mkv::Error) -> Self {
        use tic_mkv::Error as E;
        match e {
            E::BlowUp { .. } | E::NonFinite(_) | E::Breakdown { .. } | E::MaxIterations(_) => {
                CliError::Divergence(e.to_string())
            }
            E::InvalidParameter(_)
            | E::DimensionMismatch { .. }
            | E::Monotonicity { .. }
            | E::DegenerateDiffusion { .. }
            | E::BackendMismatch(_)
            | E::Probe(_)
            | E::OffGrid(_)
            | E::GridMismatch(_)
            | E::Singular { .. }
            | E::TauDependent(_) => CliError::Config(e.to_string()),
            E::Io(io) => CliError::Io(io),
            other => CliError::Solver(other),
        }
    }
}
