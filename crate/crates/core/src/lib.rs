//! Linear-quadratic mean-field control with graphon interactions and common
//! noise: discretized kernel calculus, the backward Riccati system, and a
//! Monte-Carlo simulator used to check optimality numerically.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod applications;
pub mod config;
pub mod error;
pub mod graphon;
pub mod io;
pub mod kernel;
pub mod model;
pub mod riccati;
pub mod simulator;

pub use error::{Error, Result};
pub use graphon::Graphon;
pub use kernel::{LabelGrid, MatrixField, MatrixKernel, ScalarField, VectorField};
pub use model::{Coefficients, ProblemSpec, TimeGrid};
pub use riccati::{solve_backward, value_function, RiccatiSolution, Scheme, SolverOptions};
