//! Closed-loop glucose control for the Göttingen minipig with online learning
//! of the circadian insulin-sensitivity rhythm.
//!
//! The crate simulates a linear twelve-state glucose/insulin model whose
//! insulin-sensitivity factor follows a 24 h profile, estimates the state with
//! an unscented Kalman filter, reconstructs the sensitivity-driven disturbance
//! from one-step model mismatch, learns its daily shape with a periodic-kernel
//! Gaussian process, and closes the loop with a constrained model-predictive
//! controller that consumes the learned disturbance preview.
//!
//! Module map:
//! - [`numerics`]: dense matrices, matrix exponential, ZOH discretization,
//!   Cholesky and LU solves
//! - [`model`]: the published twelve-state minipig model and its split into
//!   nominal dynamics plus a sensitivity input channel
//! - [`plant`]: continuous-time simulation truth with meal impulses
//! - [`estimator`]: unscented Kalman filter on the discretized model
//! - [`gp`]: periodic-kernel Gaussian-process regression and hyperparameter
//!   fitting
//! - [`learner`]: disturbance reconstruction, zero-phase filtering, rolling
//!   training window
//! - [`mpc`]: condensed quadratic program and active-set solver
//! - [`harness`]: scenario definitions, the closed-loop driver, statistics
//! - [`config`]: run configuration with validated overrides

pub mod config;
pub mod error;
pub mod estimator;
pub mod gp;
pub mod harness;
pub mod learner;
pub mod model;
pub mod mpc;
pub mod numerics;
pub mod plant;
pub mod simplex;

pub use error::Error;
