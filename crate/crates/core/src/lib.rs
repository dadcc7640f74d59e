//! Finite-sample inference for treatment effects when treated cells hold
//! very few units.
//!
//! Under the null of no treatment effect, the centered indicator moments
//! `(1{Y <= μ(Y^{t-1})} - τ) Φ_K(Y^{t-1})` of every cell are distributed as
//! averages of centered Bernoulli(τ) draws, conditionally on lagged
//! outcomes and treatment histories. The test statistic aggregates these
//! moments at a control-group estimate of `μ`; its critical value comes
//! from simulating (or, in the scalar case, enumerating) that law.

pub mod basis;
pub mod confidence;
pub mod did;
pub mod error;
pub mod estimator;
pub mod mc;
pub mod multitime;
pub mod optim;
pub mod panel;
pub mod quantreg;
pub mod rng;

pub use error::{Error, Result};
