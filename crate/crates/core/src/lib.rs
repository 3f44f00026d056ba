//! Sparse logistic principal components analysis for binary and mixed
//! binary/continuous data, fitted by majorization-minimization.
//!
//! The canonical parameter matrix is `Θ = 1μᵀ + ABᵀ` with orthonormal scores
//! `A` and L1-penalized loadings `B`. See [`solver::fit`] for the fitting
//! engine and [`selection`] for BIC-based choice of the penalty and rank.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod link;
pub mod model;
pub mod selection;
pub mod simulation;
pub mod solver;

pub use data::{BinaryDataMatrix, ColumnKind};
pub use error::{Result, SlpcaError};
pub use link::{inverse_logit, Link};
pub use model::{
    canonical_matrix, log_likelihood, penalized_objective, penalty_value, probabilities, SlpcaModel,
};
pub use selection::{bic, select_k, select_lambda, SelectionConfig, SelectionReport};
pub use solver::{fit, fit_from, Bound, FitConfig, FitResult, ScoreStep};
