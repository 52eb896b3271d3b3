//! Factorial hidden Markov models fitted with factorized asymptotic Bayesian
//! inference, with automatic pruning of redundant hidden states.

pub mod asymptotics;
pub mod baselines;
pub mod error;
pub mod fab;
pub mod flat;
pub mod harness;
pub mod io;
pub mod model;
pub mod simulate;
pub mod variational;

pub use error::{FhmmError, Result};
pub use model::{FhmmParameters, LatentAssignment, Layer, ModelStructure, SequenceDataset};
