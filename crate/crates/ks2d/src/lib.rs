//! Finite-difference solvers for the two-dimensional Keller-Segel
//! chemotaxis system
//!
//! ```text
//! d rho / dt = div(grad rho - rho grad c)
//! eps dc/dt  = lap c + rho
//! ```
//!
//! built around the symmetric reformulation
//! `d rho / dt = div(M grad(rho / M))` with `M = e^c`, which exposes the
//! structure that makes positivity, mass conservation, and a discrete
//! free-energy law hold for the discretizations in [`schemes`]:
//!
//! * a first-order-in-time ADI scheme whose sweeps reduce to batches of
//!   tridiagonal solves,
//! * the unfactored five-point scheme solved by conjugate gradients,
//! * a second-order additive ADI scheme with conditional positivity.
//!
//! [`diagnostics`] evaluates the conserved quantities and the discrete
//! free energy; [`manufactured`] carries an exact forced solution for
//! convergence studies; [`harness`] reproduces the convergence and
//! efficiency experiments end to end and backs the `ks2d` binary.
//!
//! The `book/` directory of the repository is a narrative guide; its
//! code snippets compile and run as doc-tests through the [`guide`]
//! module.

// Index-style loops mirror the stencil arithmetic throughout; iterator
// rewrites obscure the index algebra the formulas are written in.
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod manufactured;
pub mod operators;
pub mod rng;
pub mod schemes;

#[cfg(any(doc, doctest, test))]
pub mod guide;

pub use grid::{make_grid, sample_field, BoundaryKind, Field, GridSpec, State};
pub use schemes::{
    check_second_order_positivity, step, step_adi_first_order, step_adi_second_order,
    step_five_point, AdiWorkspace, SchemeConfig, SchemeKind,
};
