//! Numerical toolkit for stochastic differential equations driven by
//! G-Brownian motion: the sublinear generator `G`, scenario simulation,
//! Euler integration, sufficient-condition checks for comparison and
//! monotonicity, the infinitesimal generator, and a monotone finite-difference
//! solver for the associated fully nonlinear PDE.

pub mod conditions;
pub mod config;
pub mod error;
pub mod experiments;
pub mod expr;
pub mod g;
pub mod generator;
pub mod gpde;
pub mod gsde;
pub mod numeric;
pub mod scenario;

pub use error::{Error, Result};
