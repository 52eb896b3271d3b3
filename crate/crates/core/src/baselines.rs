//! Variational Bayes baseline: the same EM loop with uniform δ, Dirichlet
//! posterior-mean transitions and component death at the same threshold.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fab::{fit, FitConfig, FitReport, Variant};
use crate::flat::DEFAULT_PRODUCT_CAP;
use crate::model::{ModelStructure, SequenceDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VbConfig {
    pub max_iters: usize,
    pub prune_threshold: f64,
    pub convergence_tol: f64,
    pub patience: usize,
    pub seed: u64,
    pub product_cap: usize,
    /// Symmetric Dirichlet prior strength on every initial and transition row.
    pub concentration: f64,
}

impl Default for VbConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            prune_threshold: 1.0,
            convergence_tol: 1e-6,
            patience: 3,
            seed: 0,
            product_cap: DEFAULT_PRODUCT_CAP,
            concentration: 1.0,
        }
    }
}

impl From<&VbConfig> for FitConfig {
    fn from(c: &VbConfig) -> Self {
        FitConfig {
            variant: Variant::Vb,
            max_iters: c.max_iters,
            prune_threshold: c.prune_threshold,
            convergence_tol: c.convergence_tol,
            patience: c.patience,
            seed: c.seed,
            product_cap: c.product_cap,
            concentration: c.concentration,
            ..FitConfig::default()
        }
    }
}

pub fn vb_fit(data: &SequenceDataset, structure: &ModelStructure, config: &VbConfig) -> Result<FitReport> {
    fit(data, structure, &FitConfig::from(config))
}
