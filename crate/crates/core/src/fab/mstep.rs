//! Least-squares update of the emission weights and the diagonal covariance.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

use crate::error::{FhmmError, Result};
use crate::model::SequenceDataset;
use crate::variational::VariationalState;

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;
/// Lower bound applied to updated covariance entries.
pub const COVARIANCE_FLOOR: f64 = 1e-8;

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn pseudo_inverse(a: &Array2<f64>, rel_cutoff: f64) -> Array2<f64> {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cut = rel_cutoff * max;
    let mut out = Array2::zeros((n, n));
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= cut || lambda == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        for i in 0..n {
            let vi = v[i] / lambda;
            for j in 0..n {
                out[[i, j]] += vi * v[j];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MstepResult {
    /// W^m, D×K_m per layer.
    pub weights: Vec<Array2<f64>>,
    pub bias: Array1<f64>,
    pub covariance: Array1<f64>,
}

struct Moments {
    gram: Array2<f64>,
    cross: Array2<f64>,
    xx: Array1<f64>,
}

/// Feature vector per step: the layers' marginals stacked, followed by a
/// constant 1 when the bias is estimated.
fn sequence_moments(q: &VariationalState, x: &Array2<f64>, n: usize, sizes: &[usize], fit_bias: bool) -> Result<Moments> {
    let p: usize = sizes.iter().sum::<usize>() + usize::from(fit_bias);
    let t_len = x.nrows();
    let mut phi = Array2::zeros((t_len, p));
    let mut offset = 0;
    for (m, &k) in sizes.iter().enumerate() {
        phi.slice_mut(s![.., offset..offset + k]).assign(&q.unary(n, m)?);
        offset += k;
    }
    if fit_bias {
        phi.column_mut(p - 1).fill(1.0);
    }
    let mut gram = phi.t().dot(&phi);
    // Within a layer the states are exclusive: E[z z^⊤] = diag(q).
    let mut offset = 0;
    for &k in sizes {
        for i in 0..k {
            for j in 0..k {
                gram[[offset + i, offset + j]] = if i == j {
                    phi.column(offset + i).sum()
                } else {
                    0.0
                };
            }
        }
        offset += k;
    }
    let cross = x.t().dot(&phi);
    let xx = x.mapv(|v| v * v).sum_axis(ndarray::Axis(0));
    Ok(Moments { gram, cross, xx })
}

/// W = (Σ x φ^⊤)(Σ E[φ φ^⊤])^†, C = mdiag{(Σ T_n)⁻¹ Σ (x x^⊤ − W φ x^⊤)}.
pub fn mstep(q: &VariationalState, data: &SequenceDataset, fit_bias: bool) -> Result<MstepResult> {
    if q.sequences() != data.len() {
        return Err(FhmmError::Shape("state and dataset sequence counts differ".into()));
    }
    let sizes: Vec<usize> = q.chains[0].iter().map(|c| c.log_h.ncols()).collect();
    let per_seq = data
        .sequences
        .par_iter()
        .enumerate()
        .map(|(n, x)| sequence_moments(q, x, n, &sizes, fit_bias))
        .collect::<Result<Vec<_>>>()?;
    let mut it = per_seq.into_iter();
    let mut acc = it.next().expect("dataset is non-empty");
    for mo in it {
        acc.gram += &mo.gram;
        acc.cross += &mo.cross;
        acc.xx += &mo.xx;
    }

    let coef = acc.cross.dot(&pseudo_inverse(&acc.gram, PINV_RELATIVE_CUTOFF));
    let total = data.total_len() as f64;
    // Σ_t (W φ_t)_d x_{t,d} = Σ_p W_{d,p} (Σ_t x_{t,d} φ_{t,p}).
    let explained = (&coef * &acc.cross).sum_axis(ndarray::Axis(1));
    let mut covariance = (&acc.xx - &explained) / total;
    for (d, c) in covariance.iter_mut().enumerate() {
        if !(*c >= COVARIANCE_FLOOR) {
            warn!("covariance entry {d} updated to {c:.3e}; flooring at {COVARIANCE_FLOOR:e}");
            *c = COVARIANCE_FLOOR;
        }
    }

    let mut weights = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &k in &sizes {
        weights.push(coef.slice(s![.., offset..offset + k]).to_owned());
        offset += k;
    }
    let bias = if fit_bias {
        coef.column(offset).to_owned()
    } else {
        Array1::zeros(data.dim())
    };
    Ok(MstepResult {
        weights,
        bias,
        covariance,
    })
}
