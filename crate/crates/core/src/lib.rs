//! Uncertainty propagation with intrusive generalized polynomial chaos and
//! trajectory optimization over the resulting coefficient dynamics.
//!
//! The pieces, bottom up:
//!
//! - [`orthopoly`]: Hermite/Legendre families, Gauss rules, multi-indices.
//! - [`gpc`]: projection of a stochastic model onto the polynomial basis.
//! - [`models`]: Duffing oscillator, quadrotor, and small reference systems.
//! - [`discretize`]: explicit Euler and variational (DEL) step maps together
//!   with their first- and second-order linearizations.
//! - [`cost`]: quadratic costs on gPC coefficients.
//! - [`ddp`]: the DDP solver.
//! - [`verify`]: Monte-Carlo propagation, finite differences, rate fits.

pub mod autodiff;
pub mod cost;
pub mod ddp;
pub mod discretize;
pub mod error;
pub mod gpc;
pub mod models;
pub mod orthopoly;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
