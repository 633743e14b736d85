//! Probabilistic multi-person body attribute recovery with a Bayesian network
//! of conditional distributions.
//!
//! Each detected person is described by intrinsics, a 2D reference keypoint,
//! an encoded depth `ln(d / f)`, body shape, expression and per-bone
//! orientations. Orientations follow matrix Fisher distributions on SO(3); the
//! other attributes are diagonal Gaussians, and the focal length is log-normal.

pub mod bayesnet;
pub mod body;
pub mod detection;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod so3;
pub mod synth;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
