//! Lifelong sequence generation with dynamic module expansion and adaptation.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod error;
pub mod expansion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pool;
pub mod selection;
pub mod taskgen;
mod train;

pub use error::{DmeaError, Result};
