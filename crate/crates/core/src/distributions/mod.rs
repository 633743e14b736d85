//! Parametric families used by the network nodes.

pub mod fisher;
pub mod gaussian;
pub mod lognormal;

use serde::{Deserialize, Serialize};

pub use fisher::{
    fisher_log_density, fisher_log_density_grad, fisher_mode, fisher_normalizer,
    fisher_param_log_density_grad, fisher_sample, sigmoid, FisherNormalizer, FisherParamGrad,
    MatrixFisher, MatrixFisherParams,
};
pub use gaussian::{
    gaussian_fuse, gaussian_log_density, raw_from_std, std_from_raw, DiagGaussianParams,
    Dispersion,
};
pub use lognormal::LogNormalParams;

/// Tagged JSON record for any distribution, `{"family": ..., "params": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum DistributionRecord {
    DiagGaussian(DiagGaussianParams),
    LogNormal(LogNormalParams),
    MatrixFisher(MatrixFisherParams),
}
