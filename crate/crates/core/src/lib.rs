//! Most-probable unsafe paths and rare-event probabilities for weakly
//! perturbed dynamical systems with Gaussian-uncertain initial conditions.
//!
//! The crate computes minimum-action (maximum-likelihood) paths hitting an
//! unsafe set, maximum-a-posteriori paths with a free initial state, checks
//! candidates against the maximum-principle necessary conditions, and turns
//! the variational output into hitting-probability estimates that can be
//! cross-checked by Monte Carlo simulation.

pub mod action;
pub mod dynamics;
pub mod error;
pub mod montecarlo;
pub mod pmp;
pub mod probability;
pub mod scenarios;
pub mod solver;
pub mod unsafe_set;

mod lbfgs;
mod transcription;
pub(crate) mod util;

pub use action::{action_functional, map_objective, recover_deviation, InitialDistribution};
pub use dynamics::{DynamicsModel, ModelKind, Path, TimeGrid};
pub use error::{Error, Result};
pub use solver::{
    multi_start, quasipotential, solve_ml, solve_map, Problem, ProblemKind, SolveStatus,
    SolverOptions, TimeWindow, VariationalSolution,
};
pub use unsafe_set::UnsafeSet;
