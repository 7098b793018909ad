//! Robust optimal state feedback for discrete-time Markov jump linear systems
//! whose transition probability matrix is unknown and time-varying inside a
//! polytope of stochastic matrices.
//!
//! - [`model`]: problem data, validation, and the JSON problem format.
//! - [`stability`]: second-moment lifting and joint-spectral-radius bounds.
//! - [`finite_horizon`]: backward coupled Riccati recursion with pruning.
//! - [`infinite_horizon`]: stabilizing coupled algebraic Riccati solution.
//! - [`simulate`]: closed-loop trajectories against transition adversaries.

pub mod example;
pub mod finite_horizon;
pub mod infinite_horizon;
pub mod linalg;
pub mod model;
mod precond;
pub mod simulate;
pub mod stability;

pub use model::{InitialCondition, MjlsModel, ModeInfo, Problem, TerminalWeights, TpmPolytope};
