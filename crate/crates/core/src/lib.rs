//! Gaussian-process tuning of cooperative impedance controllers.
//!
//! The crate has three layers:
//!
//! * numerics: [`kernel`], [`linalg`], [`gp`], [`mfgp`] implement single- and
//!   two-fidelity Gaussian-process regression with an AR(1) coupling between
//!   fidelities;
//! * theory: [`bounds`] computes the covariance bound, the information-gain
//!   bound, and the resulting cumulative-regret bound, and checks them against
//!   exact quantities;
//! * experiment: [`sim`] simulates the coupled human-robot plant, [`bayesopt`]
//!   runs UCB tuning over a gain grid, and [`bench`] wires everything into a
//!   reproducible benchmark campaign with CSV/SVG outputs.

pub mod bayesopt;
pub mod bench;
pub mod bounds;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod mfgp;
pub mod sim;

pub use error::{MfError, Result};
