//! Particle approximation of second-order McKean–Vlasov stochastic evolution
//! equations with Poisson jumps, built on spectral cosine families.
//!
//! The state space is `ℝ^d` with a symmetric nonpositive generator. The
//! crate provides the cosine family and its certified constants, empirical
//! laws with Wasserstein distances, Q-Wiener and compensated Poisson noise,
//! coefficient models with their hypothesis checks, the delayed
//! (Carathéodory) and Euler particle solvers, the averaging experiment and
//! numerical checks of the integral inequalities the analysis relies on.

// `!(x > 0.0)` is used on purpose throughout: it rejects NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod coefficients;
pub mod cosine_family;
pub mod error;
pub mod exec;
pub mod grid;
pub mod inequalities;
pub mod measure;
pub mod noise;
pub mod quadrature;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use nalgebra::DMatrix;
