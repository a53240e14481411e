//! Belief-space control ensembles and inverse rational control.
//!
//! The crate is organised bottom-up:
//!
//! - [`params`] and [`task`]: parameterised firefly navigation tasks (1D discrete, 2D continuous).
//! - [`belief`]: Gaussian beliefs, exact 1D prediction and the extended Kalman filter.
//! - [`nn`]: dense softplus networks with hand-written reverse-mode gradients and random bases.
//! - [`learner`]: value/policy ensembles trained jointly over parameter space.
//! - [`inference`]: trajectory likelihood, maximum-likelihood fitting and Fisher intervals.

pub mod belief;
pub mod error;
pub mod inference;
pub mod learner;
pub mod nn;
pub mod params;
pub mod real;
pub mod rng;
pub mod task;

pub use error::{IrcError, Result};
