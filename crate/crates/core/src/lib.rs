//! Closed-loop equilibria for time-inconsistent McKean-Vlasov control problems.
//!
//! The equilibrium is a fixed point of the composition of two maps:
//!
//! * the forward law map ([`simulate::simulate_t1`]), which takes a feedback
//!   strategy to the distribution curve of the controlled McKean-Vlasov SDE;
//! * the backward solve, which takes a frozen distribution curve to the
//!   time-inconsistent equilibrium strategy, either through the two-parameter
//!   Riccati family ([`riccati`]) for linear-quadratic problems or through a
//!   finite-difference solve of the HJB family ([`hjb1d`]) in one dimension.
//!
//! [`equilibrium`] iterates the composition with common random numbers and
//! [`verify`] certifies the result with spike-variation tests.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod equilibrium;
pub mod error;
pub mod hjb1d;
pub mod measures;
pub mod model;
pub mod registry;
pub mod riccati;
pub mod rng;
pub mod simulate;
pub mod strategy;
pub mod verify;

pub use equilibrium::{
    consistency_check, contraction_report, solve_equilibrium, Backend, EquilibriumOptions,
    EquilibriumResult, Problem,
};
pub use error::{Error, Result};
pub use measures::{
    curve_distance_m, moments, wasserstein2, DistributionCurve, EmpiricalMeasure, MomentVector,
    W2Method,
};
pub use model::{build_lq_catalog, eval_psi, LqCatalog, LqModelSpec, ModelSpec};
pub use riccati::{extract_strategy_lq, solve_riccati_family, value_lq, RiccatiFamily};
pub use simulate::{simulate_t1, InitialLaw, ParticlePaths, SimOptions};
pub use strategy::{AffineStrategy, Feedback, FeedbackStrategy, GridStrategy};
