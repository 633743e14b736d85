use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gaussian::std_from_raw;
use crate::error::{Error, Result};

/// Log-normal distribution over a positive scalar (the focal length), i.e. a
/// Gaussian over its logarithm with the `(1 + exp)^2` variance map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu_log: f64,
    pub sigma_raw: f64,
}

impl LogNormalParams {
    pub fn new(mu_log: f64, sigma_raw: f64) -> Self {
        LogNormalParams { mu_log, sigma_raw }
    }

    pub fn log_std(&self) -> f64 {
        std_from_raw(self.sigma_raw)
    }

    pub fn log_variance(&self) -> f64 {
        let s = self.log_std();
        s * s
    }

    /// Mode of the density over `f` itself: `exp(mu_log - var)`.
    pub fn mode(&self) -> f64 {
        (self.mu_log - self.log_variance()).exp()
    }

    /// Mode of the Gaussian over `ln f`, mapped back: `exp(mu_log)`.
    pub fn log_space_mode(&self) -> f64 {
        self.mu_log.exp()
    }

    /// Density over `f`, including the `1/f` Jacobian.
    pub fn log_density(&self, f: f64) -> Result<f64> {
        if !(f > 0.0) {
            return Err(Error::ParamOutOfRange(format!("log-normal support is f > 0, got {f}")));
        }
        let s = self.log_std();
        let z = (f.ln() - self.mu_log) / s;
        Ok(-0.5 * (2.0 * PI).ln() - s.ln() - f.ln() - 0.5 * z * z)
    }

    /// Gradient of [`Self::log_density`] with respect to `(mu_log, sigma_raw)`.
    pub fn log_density_grad(&self, f: f64) -> Result<(f64, f64)> {
        if !(f > 0.0) {
            return Err(Error::ParamOutOfRange(format!("log-normal support is f > 0, got {f}")));
        }
        let e = self.sigma_raw.exp();
        let s = 1.0 + e;
        let d = f.ln() - self.mu_log;
        Ok((d / (s * s), (-1.0 / s + d * d / (s * s * s)) * e))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (self.mu_log + self.log_std() * rng.sample::<f64, _>(StandardNormal)).exp()
    }
}
