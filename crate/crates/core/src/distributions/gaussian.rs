use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps an unconstrained dispersion parameter to a standard deviation, `1 + exp(s)`.
#[inline]
pub fn std_from_raw(sigma_raw: f64) -> f64 {
    1.0 + sigma_raw.exp()
}

/// Inverse of [`std_from_raw`], defined for `std > 1`.
pub fn raw_from_std(std: f64) -> Option<f64> {
    (std > 1.0 && std.is_finite()).then(|| (std - 1.0).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dispersion {
    /// Regression-head form: `Sigma = diag(1 + exp(sigma_raw))^2`.
    #[serde(rename = "sigma_raw")]
    Raw(Vec<f64>),
    /// Direct variances, used for fused posteriors whose variance left the
    /// `(1 + exp)^2` range.
    #[serde(rename = "fused_variance")]
    Fused(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussianParams {
    pub mu: Vec<f64>,
    #[serde(flatten)]
    pub dispersion: Dispersion,
}

impl DiagGaussianParams {
    pub fn new(mu: Vec<f64>, sigma_raw: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma_raw.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: sigma_raw.len(),
            });
        }
        Ok(DiagGaussianParams {
            mu,
            dispersion: Dispersion::Raw(sigma_raw),
        })
    }

    pub fn from_moments(mu: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mu.len() != variance.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: variance.len(),
            });
        }
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::ParamOutOfRange("variance must be positive".into()));
        }
        let stds: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
        let raw: Option<Vec<f64>> = stds.iter().map(|s| raw_from_std(*s)).collect();
        Ok(match raw {
            Some(raw) => DiagGaussianParams {
                mu,
                dispersion: Dispersion::Raw(raw),
            },
            None => DiagGaussianParams {
                mu,
                dispersion: Dispersion::Fused(variance),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mode(&self) -> &[f64] {
        &self.mu
    }

    pub fn is_fused(&self) -> bool {
        matches!(self.dispersion, Dispersion::Fused(_))
    }

    pub fn sigma_raw(&self) -> Option<&[f64]> {
        match &self.dispersion {
            Dispersion::Raw(s) => Some(s),
            Dispersion::Fused(_) => None,
        }
    }

    pub fn stds(&self) -> Vec<f64> {
        match &self.dispersion {
            Dispersion::Raw(s) => s.iter().map(|s| std_from_raw(*s)).collect(),
            Dispersion::Fused(v) => v.iter().map(|v| v.sqrt()).collect(),
        }
    }

    pub fn variances(&self) -> Vec<f64> {
        self.stds().into_iter().map(|s| s * s).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        Ok(self
            .mu
            .iter()
            .zip(self.stds())
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -half_ln_2pi - s.ln() - 0.5 * z * z
            })
            .sum())
    }

    /// Gradients of the log-density with respect to `mu` and `sigma_raw`.
    /// Only defined for the regression-head form.
    pub fn log_density_grad(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let raw = self
            .sigma_raw()
            .ok_or_else(|| Error::ParamOutOfRange("fused Gaussian has no sigma_raw".into()))?;
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut g_mu = Vec::with_capacity(x.len());
        let mut g_raw = Vec::with_capacity(x.len());
        for ((m, r), x) in self.mu.iter().zip(raw).zip(x) {
            let e = r.exp();
            let s = 1.0 + e;
            let d = x - m;
            g_mu.push(d / (s * s));
            g_raw.push((-1.0 / s + d * d / (s * s * s)) * e);
        }
        Ok((g_mu, g_raw))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(self.stds())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

pub fn gaussian_log_density(params: &DiagGaussianParams, x: &[f64]) -> Result<f64> {
    params.log_density(x)
}

/// Product of diagonal Gaussian densities, renormalized: summed precisions and
/// a precision-weighted mean.
pub fn gaussian_fuse(params: &[DiagGaussianParams]) -> Result<DiagGaussianParams> {
    let first = params.first().ok_or(Error::EmptyList)?;
    let dim = first.dim();
    let mut precision = vec![0.0; dim];
    let mut weighted = vec![0.0; dim];
    for p in params {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        for (k, v) in p.variances().into_iter().enumerate() {
            precision[k] += 1.0 / v;
            weighted[k] += p.mu[k] / v;
        }
    }
    let mu = weighted.iter().zip(&precision).map(|(w, p)| w / p).collect();
    let variance = precision.iter().map(|p| 1.0 / p).collect();
    DiagGaussianParams::from_moments(mu, variance)
}
