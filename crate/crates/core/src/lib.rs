//! Dynamic portfolio optimization with proportional transaction costs.
//!
//! Value functions of CRRA investors are separated into a wealth power and a
//! fraction-dependent factor that is solved backward in time on a complete
//! Chebyshev basis over the hypercube of risky-asset fractions.

pub mod analysis;
pub mod approx;
pub mod dp;
pub mod error;
pub mod market;
pub mod nlp;
pub mod ntr;
pub mod options;
pub mod quadrature;

pub use error::{Error, Result};
