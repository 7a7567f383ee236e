//! Deep-FBSDE solver for stochastic optimal control via a neural
//! Hamiltonian operator: feedback-control and decoupling-field networks
//! parameterize the forward-backward dynamics, which are simulated with a
//! differentiable Euler-Maruyama scheme and trained end to end.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod network;
pub mod problems;
pub mod simulator;
pub mod trainer;

pub use error::{NhoError, Result};
