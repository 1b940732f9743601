//! Backward Euler-Maruyama (BEM) integration of dissipative SDEs with
//! super-linear drift, ergodic temporal averages and central-limit
//! diagnostics for their fluctuations.
//!
//! Module map:
//!
//! - [`model`]: SDE coefficients, built-in examples, assumption probes
//! - [`rng`]: reproducible per-path Gaussian streams
//! - [`integrator`]: the implicit step, path simulation, strong errors
//! - [`ergodic`]: temporal averages, ergodic limits, deviation statistics
//! - [`poisson`]: the Poisson-equation solution, asymptotic variance and
//!   the martingale/remainder split of the deviation statistic
//! - [`stats`]: KS distance, order fits, moment summaries
//! - [`experiments`]: configuration, experiment runners and suites

pub mod error;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod stats;
pub mod integrator;
pub mod ergodic;
pub mod poisson;
pub mod experiments;

pub use error::{Error, Result};
