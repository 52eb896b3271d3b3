//! Shrinkage factors δ and the α̂, β̂ estimators built from expected counts.

use log::warn;
use ndarray::{Array1, Array2};

use crate::error::{FhmmError, Result};
use crate::variational::{CollapsedEstimates, SufficientStats};

/// Floor applied to un-smoothed probability estimates.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageFactors {
    /// δ^m, normalized per layer.
    pub delta: Vec<Array1<f64>>,
    pub log_delta: Vec<Array1<f64>>,
    /// log Δ^m.
    pub log_normalizer: Vec<f64>,
    /// ĉ_{m,·,k}.
    pub masses: Vec<Array1<f64>>,
}

fn log_sum_exp(v: &Array1<f64>) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

impl ShrinkageFactors {
    /// δ_k ∝ exp{−numerator_m / (2 ĉ_k)} per layer.
    pub fn from_masses(masses: Vec<Array1<f64>>, numerators: &[f64]) -> Result<Self> {
        let mut delta = Vec::with_capacity(masses.len());
        let mut log_delta = Vec::with_capacity(masses.len());
        let mut log_normalizer = Vec::with_capacity(masses.len());
        for (m, (mass, &num)) in masses.iter().zip(numerators).enumerate() {
            if let Some(k) = mass.iter().position(|&c| !(c > 0.0)) {
                return Err(FhmmError::MustPrune { layer: m, state: k });
            }
            let raw = mass.mapv(|c| -num / (2.0 * c));
            let log_z = log_sum_exp(&raw);
            let ld = raw.mapv(|r| r - log_z);
            delta.push(ld.mapv(f64::exp));
            log_delta.push(ld);
            log_normalizer.push(log_z);
        }
        Ok(Self {
            delta,
            log_delta,
            log_normalizer,
            masses,
        })
    }

    /// δ = 1/K_m in every layer: no shrinkage.
    pub fn uniform(masses: Vec<Array1<f64>>) -> Self {
        let delta: Vec<Array1<f64>> = masses
            .iter()
            .map(|c| Array1::from_elem(c.len(), 1.0 / c.len() as f64))
            .collect();
        let log_delta = delta.iter().map(|d| d.mapv(f64::ln)).collect();
        let log_normalizer = masses.iter().map(|c| (c.len() as f64).ln()).collect();
        Self {
            delta,
            log_delta,
            log_normalizer,
            masses,
        }
    }

    pub fn layers(&self) -> usize {
        self.delta.len()
    }
}

/// Shrinkage factors of the collapsed objective: δ_k ∝ exp{−D / (2 ĉ_{·,k})}.
pub fn shrinkage_factors(stats: &[SufficientStats], dim: usize) -> Result<ShrinkageFactors> {
    let numerators = vec![dim as f64; stats.len()];
    ShrinkageFactors::from_masses(stats.iter().map(|s| s.mass.clone()).collect(), &numerators)
}

/// α̂ = (c + ĉ_0) / (Kc + N), β̂_{j,·} = (c + ĉ_{j,·}) / (Kc + Σ_{t<T} q̂(z_{t,j})).
/// With c = 1 these are the collapsed estimates; other c give Dirichlet
/// posterior means.
pub fn smoothed_estimates(stats: &[SufficientStats], n_sequences: usize, concentration: f64) -> CollapsedEstimates {
    if concentration <= 0.0 {
        return maximum_likelihood(stats);
    }
    let mut initial = Vec::with_capacity(stats.len());
    let mut transition = Vec::with_capacity(stats.len());
    for st in stats {
        let k = st.mass.len() as f64;
        initial.push(st.initial.mapv(|c| (concentration + c) / (k * concentration + n_sequences as f64)));
        let mut b = Array2::zeros(st.transitions.dim());
        for (j, mut row) in b.rows_mut().into_iter().enumerate() {
            let denom = k * concentration + st.outflow[j];
            row.assign(&st.transitions.row(j).mapv(|c| (concentration + c) / denom));
        }
        transition.push(b);
    }
    CollapsedEstimates { initial, transition }
}

pub fn collapsed_estimates(stats: &[SufficientStats], n_sequences: usize) -> CollapsedEstimates {
    smoothed_estimates(stats, n_sequences, 1.0)
}

fn normalize_counts(counts: ndarray::ArrayView1<f64>, what: &str) -> Array1<f64> {
    let k = counts.len();
    let total: f64 = counts.sum();
    if !(total > 0.0) {
        warn!("{what} has no expected counts; using a uniform row");
        return Array1::from_elem(k, 1.0 / k as f64);
    }
    let mut p = counts.mapv(|c| (c / total).max(PROBABILITY_FLOOR));
    let s = p.sum();
    p /= s;
    p
}

/// Normalized expected counts, floored at [`PROBABILITY_FLOOR`].
fn maximum_likelihood(stats: &[SufficientStats]) -> CollapsedEstimates {
    let mut initial = Vec::with_capacity(stats.len());
    let mut transition = Vec::with_capacity(stats.len());
    for (m, st) in stats.iter().enumerate() {
        let k = st.mass.len();
        initial.push(normalize_counts(st.initial.view(), &format!("initial distribution of layer {m}")));
        let mut b = Array2::zeros((k, k));
        for j in 0..k {
            b.row_mut(j)
                .assign(&normalize_counts(st.transitions.row(j), &format!("transition row {j} of layer {m}")));
        }
        transition.push(b);
    }
    CollapsedEstimates { initial, transition }
}

/// Maximum-likelihood α̂, β̂ from expected counts together with shrinkage
/// factors whose exponent also charges each state for its K_m − 1 free
/// transition probabilities: δ_k ∝ exp{−(D + K_m − 1) / (2 ĉ_{·,k})}.
pub fn noncollapsed_estimates(stats: &[SufficientStats], dim: usize) -> Result<(CollapsedEstimates, ShrinkageFactors)> {
    let numerators: Vec<f64> = stats.iter().map(|s| (dim + s.mass.len() - 1) as f64).collect();
    let shrink = ShrinkageFactors::from_masses(stats.iter().map(|s| s.mass.clone()).collect(), &numerators)?;
    Ok((maximum_likelihood(stats), shrink))
}
