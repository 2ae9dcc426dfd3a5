//! Sensitivity analysis for diffusion models under additive perturbations of the
//! target measure.
//!
//! The crate computes how a diffusion model's score function responds when its
//! target `rho` is mixed with a perturbation measure `nu`, and propagates that
//! response through probability-flow ODE and reverse-SDE sampling to predict how
//! individual samples move. Gaussian-mixture targets make every quantity
//! available in closed form, which the test suites use as ground truth.

pub mod artifact;
pub mod baseline_ot;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod likelihood;
pub mod measures;
pub mod rng;
pub mod schedules;
pub mod score_source;
pub mod sensitivity;
pub mod stats;

pub use error::{Error, Result};
