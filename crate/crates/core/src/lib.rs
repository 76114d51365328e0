//! Band structure of the magnetic Laplacian `(-i∇ - A)²` with `A = (0, Bx, 0)`
//! on laterally coupled hard-wall layers.
//!
//! The `y`-direction is removed by the partial Fourier transform; each fiber
//! operator `H(p)` lives on a two-dimensional cross-section and is
//! discretized by finite volumes. Three cross-sections are supported: a layer
//! with a Neumann window in its top wall, a double layer coupled through a
//! strip window, and a double layer with a one-sided barrier.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod convergence;
pub mod discretize;
pub mod dispersion;
pub mod eigensolve;
pub mod error;
pub mod model;
pub mod oracle1d;
pub mod verify;

pub use error::{Error, Result};
