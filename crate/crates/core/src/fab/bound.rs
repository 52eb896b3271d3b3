//! The objective 𝒢 and its components under a factorized q.

use ndarray::Array2;
use serde::Serialize;

use super::shrinkage::ShrinkageFactors;
use super::Variant;
use crate::error::{FhmmError, Result};
use crate::model::{ln_2pi, FhmmParameters, SequenceDataset};
use crate::variational::{CollapsedEstimates, SufficientStats, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FicTerms {
    /// E_q[log p(x | z, W, C)].
    pub expected_loglik: f64,
    /// Σ q log δ.
    pub shrinkage_term: f64,
    /// Σ q log α̂ + Σ q_pair log β̂.
    pub markov_term: f64,
    /// −E_q[log q].
    pub entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

impl FicTerms {
    fn assemble(expected_loglik: f64, shrinkage_term: f64, markov_term: f64, entropy: f64, penalty: f64) -> Self {
        Self {
            expected_loglik,
            shrinkage_term,
            markov_term,
            entropy,
            penalty,
            total: expected_loglik + shrinkage_term + markov_term + entropy + penalty,
        }
    }

    /// Lower bound on the log-likelihood of the data under (W, C, α̂, β̂):
    /// the objective without shrinkage and penalty.
    pub fn variational_bound(&self) -> f64 {
        self.expected_loglik + self.markov_term + self.entropy
    }
}

/// Closed-form E_q[log N(x_t | bias + Σ_m W^m z^m, C)] summed over all steps.
/// Under the factorized q the mean is linear in the marginals and each layer
/// adds its own variance tr(C⁻¹ W^m (diag q − q q^⊤) W^m⊤).
pub fn expected_loglik(params: &FhmmParameters, q: &VariationalState, data: &SequenceDataset) -> Result<f64> {
    let d = params.dim();
    let log_det: f64 = params.covariance.iter().map(|c| c.ln()).sum();
    let inv_cov = params.covariance.mapv(|c| 1.0 / c);
    let w_sq: Vec<Array2<f64>> = params.layers.iter().map(|l| l.weights.mapv(|w| w * w)).collect();
    let mut total = 0.0;
    for (n, x) in data.sequences.iter().enumerate() {
        let mut mean = Array2::zeros(x.dim());
        mean += &params.bias;
        let mut spread = Array2::<f64>::zeros(x.dim());
        for (m, layer) in params.layers.iter().enumerate() {
            let qm = q.unary(n, m)?;
            let mu = qm.dot(&layer.weights.t());
            // E[μ²] − E[μ]² per dimension for this layer.
            spread += &(qm.dot(&w_sq[m].t()) - &mu.mapv(|v| v * v));
            mean += &mu;
        }
        let resid = x - &mean;
        for t in 0..x.nrows() {
            let mut quad = 0.0;
            for j in 0..d {
                quad += (resid[[t, j]] * resid[[t, j]] + spread[[t, j]]) * inv_cov[j];
            }
            total += -0.5 * (d as f64 * ln_2pi() + log_det + quad);
        }
    }
    Ok(total)
}

fn plogq(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * q.ln()
    } else {
        0.0
    }
}

/// Σ q log α̂ + Σ q_pair log β̂.
pub fn markov_term(q: &VariationalState, estimates: &CollapsedEstimates) -> Result<f64> {
    let mut total = 0.0;
    for n in 0..q.sequences() {
        for m in 0..q.layers() {
            let mg = q.marginals(n, m)?;
            let a = &estimates.initial[m];
            let b = &estimates.transition[m];
            total += mg.unary.row(0).iter().zip(a).map(|(&p, &v)| plogq(p, v)).sum::<f64>();
            for pair in mg.pair.outer_iter() {
                total += pair.iter().zip(b.iter()).map(|(&p, &v)| plogq(p, v)).sum::<f64>();
            }
        }
    }
    Ok(total)
}

pub fn entropy(q: &VariationalState) -> Result<f64> {
    let mut total = 0.0;
    for n in 0..q.sequences() {
        for m in 0..q.layers() {
            total += q.marginals(n, m)?.entropy();
        }
    }
    Ok(total)
}

pub fn shrinkage_term(shrink: &ShrinkageFactors, stats: &[SufficientStats]) -> f64 {
    stats
        .iter()
        .zip(&shrink.log_delta)
        .map(|(st, ld)| {
            st.mass
                .iter()
                .zip(ld)
                .map(|(&c, &l)| if c > 0.0 { c * l } else { 0.0 })
                .sum::<f64>()
        })
        .sum()
}

fn check_masses(stats: &[SufficientStats]) -> Result<()> {
    for (m, st) in stats.iter().enumerate() {
        if let Some(k) = st.mass.iter().position(|&c| !(c > 0.0)) {
            return Err(FhmmError::MustPrune { layer: m, state: k });
        }
    }
    Ok(())
}

/// Complexity terms of the collapsed objective, written out with q̂'s counts.
pub fn collapsed_penalty(
    shrink: &ShrinkageFactors,
    stats: &[SufficientStats],
    dim: usize,
    n_sequences: usize,
    total_len: usize,
) -> Result<f64> {
    check_masses(stats)?;
    let d = dim as f64;
    let mut p = 0.0;
    for (st, &log_z) in stats.iter().zip(&shrink.log_normalizer) {
        let k = st.mass.len() as f64;
        p += total_len as f64 * log_z;
        p -= 0.5 * d * st.mass.iter().map(|c| c.ln()).sum::<f64>();
        p -= 0.5 * st.initial.iter().map(|c| (c + 1.0).ln()).sum::<f64>();
        p -= 0.5 * st.transitions.iter().map(|c| (c + 1.0).ln()).sum::<f64>();
        p += 0.5
            * st.transitions
                .rows()
                .into_iter()
                .map(|r| (r.sum() + k).ln())
                .sum::<f64>();
        p += 0.5 * (n_sequences as f64 + k).ln();
        p += 0.5 * d * k;
        p += (k * k - 1.0) * ln_2pi();
    }
    Ok(p)
}

/// Complexity terms when α and β are point-estimated and Laplace-approximated
/// alongside W: each state pays for D + K_m − 1 parameters against its mass,
/// and each initial distribution pays (K_m − 1)/2 · log N.
pub fn noncollapsed_penalty(
    shrink: &ShrinkageFactors,
    stats: &[SufficientStats],
    dim: usize,
    n_sequences: usize,
    total_len: usize,
) -> Result<f64> {
    check_masses(stats)?;
    let mut p = 0.0;
    for (st, &log_z) in stats.iter().zip(&shrink.log_normalizer) {
        let k = st.mass.len() as f64;
        let half = 0.5 * (dim as f64 + k - 1.0);
        p += total_len as f64 * log_z;
        p -= half * st.mass.iter().map(|c| c.ln()).sum::<f64>();
        p += half * k;
        p -= 0.5 * (k - 1.0) * (n_sequences as f64).ln();
    }
    Ok(p)
}

/// Evaluates 𝒢 for the current q with shrinkage factors and estimates taken
/// from `stats`. VB reports no shrinkage or penalty terms.
pub fn fic_bound(
    params: &FhmmParameters,
    q: &VariationalState,
    stats: &[SufficientStats],
    shrink: &ShrinkageFactors,
    estimates: &CollapsedEstimates,
    data: &SequenceDataset,
    variant: Variant,
) -> Result<FicTerms> {
    if stats.len() != params.layers.len() || shrink.layers() != params.layers.len() {
        return Err(FhmmError::Shape("statistics and parameters disagree on layer count".into()));
    }
    let ell = expected_loglik(params, q, data)?;
    let markov = markov_term(q, estimates)?;
    let h = entropy(q)?;
    let (n, total_len, dim) = (data.len(), data.total_len(), params.dim());
    let (shrinkage, penalty) = match variant {
        Variant::Rfab => (
            shrinkage_term(shrink, stats),
            collapsed_penalty(shrink, stats, dim, n, total_len)?,
        ),
        Variant::Fab => (
            shrinkage_term(shrink, stats),
            noncollapsed_penalty(shrink, stats, dim, n, total_len)?,
        ),
        Variant::Vb => (0.0, 0.0),
    };
    Ok(FicTerms::assemble(ell, shrinkage, markov, h, penalty))
}
