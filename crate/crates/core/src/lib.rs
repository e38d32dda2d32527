//! Numerical solver for the volume-form pullback equation `(g∘φ)·det∇φ = f`
//! on box domains, with exact control of the support of `φ − id`.

// Index loops mirror the stencil formulas; NaN-rejecting comparisons are deliberate.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bogovskii;
pub mod diffeo;
pub mod divergence;
pub mod domain;
pub mod field;
pub mod flow;
pub mod gallery;
pub mod grid;
pub mod io;
pub mod pipeline;
pub mod poisson;
pub mod report;
pub mod verify;

pub use field::{divergence, gradient, integrate, FieldError, ScalarField, VectorField};
pub use grid::{point, BoxDomain, Grid, GridError, Point};
