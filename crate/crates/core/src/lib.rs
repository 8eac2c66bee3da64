//! Density-constrained first-order mean field games on the flat torus.

// negated comparisons reject NaN inputs; index loops mirror the stencils
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod duality;
pub mod error;
pub mod flows;
pub mod geodesic;
pub mod grid;
pub mod io;
pub mod model;
pub mod problems;
pub mod solver;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
