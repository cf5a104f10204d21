//! Single-loop bilevel splitting methods with on-the-fly gradient estimates,
//! together with numerical certificates for the tracking, descent and
//! convergence inequalities that govern them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod diagnostics;
pub mod error;
pub mod inner;
pub mod operators;
pub mod outer;
pub mod par;
pub mod problems;
pub mod trace;
pub mod tracking;

pub use error::{Error, Result};
