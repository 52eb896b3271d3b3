//! Factorized asymptotic Bayesian inference: shrinkage factors, the objective
//! 𝒢, the M-step, pruning and the EM driver.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod bound;
pub mod fit;
pub mod mstep;
pub mod prune;
pub mod shrinkage;

pub use bound::{fic_bound, FicTerms};
pub use fit::{fit, fit_from, initialize, score, FabSession, FitConfig, FitReport, IterationRecord};
pub use mstep::{mstep, MstepResult};
pub use prune::{prune, PruneEvent, PruneOutcome};
pub use shrinkage::{collapsed_estimates, noncollapsed_estimates, shrinkage_factors, ShrinkageFactors};

/// Which objective drives the EM loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Initial and transition probabilities integrated out; shrinkage from
    /// the emission weights only.
    Rfab,
    /// Initial and transition probabilities point-estimated and charged in
    /// the shrinkage exponent alongside the emission weights.
    Fab,
    /// Mean-field variational Bayes with uniform δ and component death.
    Vb,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Rfab, Variant::Fab, Variant::Vb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rfab => "rfab",
            Variant::Fab => "fab",
            Variant::Vb => "vb",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rfab" => Ok(Variant::Rfab),
            "fab" => Ok(Variant::Fab),
            "vb" => Ok(Variant::Vb),
            other => Err(format!("unknown variant '{other}' (expected rfab, fab or vb)")),
        }
    }
}
