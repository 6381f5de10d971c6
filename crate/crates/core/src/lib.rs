//! Group Lasso and multiple kernel learning with model-selection consistency
//! diagnostics.
//!
//! * [`model`]: block structures, datasets, centered moments, patterns.
//! * [`solver`]: fixed-λ and squared-norm group Lasso, KKT certificates,
//!   paths, least squares, adaptive weights, population problem.
//! * [`consistency`]: the population condition, its refined and
//!   loading-free variants, spectral and SDP bounds, limiting pattern
//!   probabilities.
//! * [`mkl`]: multiple kernel learning, its certificate, kernel
//!   least squares, adaptive reweighting, data-driven condition estimate.
//! * [`gaussian`]: closed-form eigensystems of the Gaussian kernel under
//!   Gaussian inputs and the analytic nonparametric condition.
//! * [`experiments`]: synthetic generators, replicated sweeps, path
//!   classification.
//! * [`io`], [`rng`]: file formats and deterministic random streams.

pub mod consistency;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod io;
pub mod linalg;
pub mod mkl;
pub mod model;
pub mod rng;
pub mod solver;

pub use error::{GlError, Result};
pub use model::{
    default_pattern, empirical_moments, pattern_of, BlockStructure, Dataset, EmpiricalMoments, PopulationModel,
    SparsityPattern,
};
