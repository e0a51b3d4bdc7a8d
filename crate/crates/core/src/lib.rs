//! Path-integral solver for risk-minimizing zero-sum stochastic differential
//! games.
//!
//! Both players' saddle-point controls are estimated online from importance
//! weighted rollouts of the uncontrolled SDE, and a finite-difference solver
//! of the linear Dirichlet problem for ξ = exp(−J/λ) serves as ground truth in
//! low dimension.

pub mod closed_loop;
pub mod config;
pub mod error;
pub mod experiment;
pub mod game;
pub mod oracle;
pub mod output;
pub mod path_integral;
pub mod rng;
pub mod scenarios;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use game::{GameSpec, LambdaCertificate, StateVector};
pub use rng::RngStreamKey;
