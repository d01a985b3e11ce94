//! Approximate inverse factorization of discrete Fourier integral operator (FIO)
//! matrices.
//!
//! The pipeline approximates a dense oscillatory kernel matrix `K` with a
//! butterfly factorization, builds a hierarchical (HODLR in 1D, H-matrix in 2D)
//! approximation of the hermitian product `K* K` by randomized matrix peeling,
//! inverts that approximation with interpolative-decomposition skeletonization,
//! and composes the pieces into `K^{-1} ~= G K*`, usable either as a direct
//! solver or as a preconditioner for conjugate gradient.

pub mod butterfly;
pub mod dense;
pub mod error;
pub mod hif;
pub mod peel;
pub mod problem;
pub mod solver;
pub mod tree;

pub use error::{FioError, Result};
