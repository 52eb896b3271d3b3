//! Exact product-state expansion of an FHMM into a single flat HMM.
//!
//! Joint states are indexed in mixed radix with layer 0 as the most
//! significant digit, so the flat transition matrix is β^(1) ⊗ … ⊗ β^(M).

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{FhmmError, Result};
use crate::model::{ln_2pi, FhmmParameters};

/// Default bound on ∏_m K_m for exact expansion.
pub const DEFAULT_PRODUCT_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatHmm {
    pub layer_sizes: Vec<usize>,
    pub initial: Array1<f64>,
    pub transition: Array2<f64>,
    /// S×D, one emission mean per joint state.
    pub means: Array2<f64>,
    pub covariance: Array1<f64>,
}

/// Splits a flat index into one state per layer.
pub fn decode_joint(mut index: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (slot, &k) in out.iter_mut().zip(sizes).rev() {
        *slot = index % k;
        index /= k;
    }
    out
}

pub fn encode_joint(states: &[usize], sizes: &[usize]) -> usize {
    states
        .iter()
        .zip(sizes)
        .fold(0, |acc, (&s, &k)| acc * k + s)
}

fn checked_product(sizes: &[usize], cap: usize) -> Result<usize> {
    let size = sizes.iter().try_fold(1usize, |acc, &k| acc.checked_mul(k));
    match size {
        Some(s) if s <= cap => Ok(s),
        Some(s) => Err(FhmmError::Capacity { size: s, cap }),
        None => Err(FhmmError::Capacity { size: usize::MAX, cap }),
    }
}

/// Expands the factorial model into the equivalent flat HMM.
pub fn product_expand(params: &FhmmParameters, cap: usize) -> Result<FlatHmm> {
    params.check()?;
    let sizes: Vec<usize> = params.layers.iter().map(|l| l.states()).collect();
    let total = checked_product(&sizes, cap)?;
    let d = params.dim();

    let mut initial = Array1::zeros(total);
    let mut means = Array2::zeros((total, d));
    let joints: Vec<Vec<usize>> = (0..total).map(|s| decode_joint(s, &sizes)).collect();
    for (s, z) in joints.iter().enumerate() {
        initial[s] = z
            .iter()
            .zip(&params.layers)
            .map(|(&k, l)| l.initial[k])
            .product();
        means.row_mut(s).assign(&params.mean_vector(z)?);
    }
    let mut transition = Array2::zeros((total, total));
    for (from, zf) in joints.iter().enumerate() {
        for (to, zt) in joints.iter().enumerate() {
            transition[[from, to]] = zf
                .iter()
                .zip(zt)
                .zip(&params.layers)
                .map(|((&a, &b), l)| l.transition[[a, b]])
                .product();
        }
    }
    Ok(FlatHmm {
        layer_sizes: sizes,
        initial,
        transition,
        means,
        covariance: params.covariance.clone(),
    })
}

/// Per-state emission log densities for one observation.
fn emission_logs(means: &Array2<f64>, cov: &Array1<f64>, x: ndarray::ArrayView1<f64>, out: &mut [f64]) {
    let log_det: f64 = cov.iter().map(|c| c.ln()).sum();
    let norm = -0.5 * (cov.len() as f64 * ln_2pi() + log_det);
    for (s, slot) in out.iter_mut().enumerate() {
        let mu = means.row(s);
        let mut q = 0.0;
        for ((&xd, &md), &c) in x.iter().zip(mu.iter()).zip(cov.iter()) {
            let r = xd - md;
            q += r * r / c;
        }
        *slot = norm - 0.5 * q;
    }
}

/// Folds the emission into the predicted vector with a max shift, returning
/// the log of the mass that was normalized away.
fn absorb_emission(pred: &mut [f64], logs: &[f64]) -> f64 {
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mass = 0.0;
    for (p, &l) in pred.iter_mut().zip(logs) {
        *p *= (l - shift).exp();
        mass += *p;
    }
    if mass > 0.0 {
        pred.iter_mut().for_each(|p| *p /= mass);
    }
    shift + mass.ln()
}

impl FlatHmm {
    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    /// Scaled forward algorithm over the dense transition matrix.
    pub fn log_likelihood(&self, seq: ArrayView2<f64>) -> f64 {
        let s = self.num_states();
        let mut logs = vec![0.0; s];
        let mut alpha: Vec<f64> = self.initial.to_vec();
        let mut total = 0.0;
        for t in 0..seq.nrows() {
            if t > 0 {
                let mut next = vec![0.0; s];
                for (i, &a) in alpha.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (n, &b) in next.iter_mut().zip(self.transition.row(i).iter()) {
                        *n += a * b;
                    }
                }
                alpha = next;
            }
            emission_logs(&self.means, &self.covariance, seq.row(t), &mut logs);
            total += absorb_emission(&mut alpha, &logs);
        }
        total
    }
}

/// Applies β^(1) ⊗ … ⊗ β^(M) to a row vector over joint states one layer at a
/// time, costing S·Σ_m K_m instead of S².
fn kron_propagate(params: &FhmmParameters, sizes: &[usize], alpha: &[f64], scratch: &mut Vec<f64>) -> Vec<f64> {
    let mut cur = alpha.to_vec();
    let total = cur.len();
    for (m, layer) in params.layers.iter().enumerate() {
        let k = sizes[m];
        let inner: usize = sizes[m + 1..].iter().product();
        let outer = total / (k * inner);
        scratch.clear();
        scratch.resize(total, 0.0);
        for o in 0..outer {
            for from in 0..k {
                let base_from = (o * k + from) * inner;
                for to in 0..k {
                    let b = layer.transition[[from, to]];
                    if b == 0.0 {
                        continue;
                    }
                    let base_to = (o * k + to) * inner;
                    for i in 0..inner {
                        scratch[base_to + i] += cur[base_from + i] * b;
                    }
                }
            }
        }
        std::mem::swap(&mut cur, scratch);
    }
    cur
}

/// Exact observed-data log-likelihood of one sequence, equal to the flat
/// forward algorithm on [`product_expand`] but without materializing the
/// S×S transition matrix.
pub fn exact_log_likelihood(params: &FhmmParameters, seq: ArrayView2<f64>, cap: usize) -> Result<f64> {
    params.check()?;
    if seq.ncols() != params.dim() {
        return Err(FhmmError::Shape(format!(
            "sequence dimension {} != model dimension {}",
            seq.ncols(),
            params.dim()
        )));
    }
    let sizes: Vec<usize> = params.layers.iter().map(|l| l.states()).collect();
    let total = checked_product(&sizes, cap)?;
    let mut means = Array2::zeros((total, params.dim()));
    let mut alpha = vec![0.0; total];
    for s in 0..total {
        let z = decode_joint(s, &sizes);
        means.row_mut(s).assign(&params.mean_vector(&z)?);
        alpha[s] = z
            .iter()
            .zip(&params.layers)
            .map(|(&k, l)| l.initial[k])
            .product();
    }
    let mut logs = vec![0.0; total];
    let mut scratch = Vec::with_capacity(total);
    let mut ll = 0.0;
    for t in 0..seq.nrows() {
        if t > 0 {
            alpha = kron_propagate(params, &sizes, &alpha, &mut scratch);
        }
        emission_logs(&means, &params.covariance, seq.row(t), &mut logs);
        ll += absorb_emission(&mut alpha, &logs);
    }
    Ok(ll)
}
