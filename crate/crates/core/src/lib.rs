//! Finsler metric evaluation: exact jets of `F^2`, the spray and its
//! covariant coefficients, the H-ladder, and per-chart classification.

pub mod classify;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod jets;
pub mod library;
pub mod linalg;
pub mod spherical;
pub mod suites;

pub use error::{Error, Result};
