//! Finite-volume discretization of the fiber operator
//! `H(p) = -∂x² + (p + Bx)² - ∂z²` on a truncated grid.

pub mod assemble;
pub mod grid;
pub mod schur;
pub mod sparse;

pub use assemble::{assemble, assemble_problem, mirror_x, FiberMatrix};
pub use grid::{build_grid, FiberProblem, GridOptions, GridSpec, LayerBlock, NodeClass};
pub use schur::ShiftedFiberSolver;
pub use sparse::{CsrMatrix, SkylineCholesky};
