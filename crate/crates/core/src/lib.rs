//! Simulation and verification toolkit for stochastic differential equations
//! driven by degenerate subordinated Brownian motion.
//!
//! The crate is organised around the constructive objects of the theory:
//!
//! * [`subordinator`] — Lévy measures of one-dimensional subordinators, their
//!   analytic functionals, and clock-path sampling via small/large jump
//!   decomposition.
//! * [`noise`] — synthesis of the driving noise `L_t = W_{S_t}` conditional on
//!   a realized clock path, plus the compound-Poisson decomposition check.
//! * [`flow`] — pathwise integration of the state together with its Jacobian
//!   and inverse-Jacobian flows.
//! * [`malliavin`] — the Malliavin covariance matrix assembled from the flow,
//!   directional energies, and small-ball statistics.
//! * [`hormander`] — bracket hierarchies and the rank conditions (Hörmander,
//!   Kalman, uniform Hörmander).
//! * [`oracles`] — closed-form and quadrature oracles: Ornstein-Uhlenbeck
//!   characteristic functions, stable calibration, the Lévy-measure mixture.
//! * [`stats`] — empirical characteristic functions, kernel density
//!   estimates, the nonlocal generator, and the weak Fokker-Planck residual.

pub mod error;
pub mod flow;
pub mod hormander;
pub mod linalg;
pub mod malliavin;
pub mod models;
pub mod noise;
pub mod oracles;
pub mod quad;
pub mod seeding;
pub mod stats;
pub mod subordinator;

pub use error::{Error, Result};
