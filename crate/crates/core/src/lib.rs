// NaN must fail every tolerance check, so `!(x <= tol)` comparisons are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closure;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod io;
pub mod kernel;
pub mod oracle;
pub mod spectral;

pub use error::{Error, Result};
