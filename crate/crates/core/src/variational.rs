//! Mean-field E-step: each layer is an HMM driven by variational biases h
//! computed against the residual left by the other layers.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{FhmmError, Result};
use crate::model::{FhmmParameters, ModelStructure, SequenceDataset};

/// Initial and transition probabilities estimated from the previous
/// iteration's marginals (α̂, β̂), one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedEstimates {
    pub initial: Vec<Array1<f64>>,
    pub transition: Vec<Array2<f64>>,
}

impl CollapsedEstimates {
    pub fn uniform(structure: &ModelStructure) -> Self {
        let initial = structure
            .states()
            .iter()
            .map(|&k| Array1::from_elem(k, 1.0 / k as f64))
            .collect();
        let transition = structure
            .states()
            .iter()
            .map(|&k| Array2::from_elem((k, k), 1.0 / k as f64))
            .collect();
        Self { initial, transition }
    }

    /// Takes α and β from a parameter set.
    pub fn from_params(params: &FhmmParameters) -> Self {
        Self {
            initial: params.layers.iter().map(|l| l.initial.clone()).collect(),
            transition: params.layers.iter().map(|l| l.transition.clone()).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.initial.len()
    }
}

/// Output of the forward-backward pass for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMarginals {
    /// Normalized forward quantities f, T×K; each row sums to one.
    pub forward: Array2<f64>,
    /// Backward quantities b, T×K; last row is all ones.
    pub backward: Array2<f64>,
    /// log ζ_t for the unscaled h.
    pub log_zeta: Array1<f64>,
    /// q(z_t), T×K.
    pub unary: Array2<f64>,
    /// q(z_{t-1}, z_t) stored at index t-1, shape (T-1)×K×K.
    pub pair: Array3<f64>,
}

impl ChainMarginals {
    /// log of the chain's normalizer, Σ_t log ζ_t.
    pub fn log_normalizer(&self) -> f64 {
        self.log_zeta.sum()
    }

    /// Entropy of a Markov chain with these marginals.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for &q in self.unary.row(0) {
            if q > 0.0 {
                h -= q * q.ln();
            }
        }
        for (t, pair) in self.pair.outer_iter().enumerate() {
            let prev = self.unary.row(t);
            for ((j, _), &p) in pair.indexed_iter() {
                if p > 0.0 && prev[j] > 0.0 {
                    h -= p * (p / prev[j]).ln();
                }
            }
        }
        h
    }
}

/// Variational state of one (sequence, layer) chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPosterior {
    /// log h_t, T×K (unscaled).
    pub log_h: Array2<f64>,
    /// Unset until the first forward-backward pass.
    pub marginals: Option<ChainMarginals>,
}

impl ChainPosterior {
    /// Entropy through the normalizer identity
    /// H = log 𝒵 − E_q[log h] − E_q[log α̂] − E_q[log β̂].
    pub fn entropy_from_normalizer(
        &self,
        initial: ArrayView1<f64>,
        transition: ArrayView2<f64>,
    ) -> Option<f64> {
        let mg = self.marginals.as_ref()?;
        let mut h = mg.log_normalizer();
        h -= weighted_log(mg.unary.view(), self.log_h.view(), false);
        for (&q, &a) in mg.unary.row(0).iter().zip(initial) {
            if q > 0.0 {
                h -= q * a.ln();
            }
        }
        for pair in mg.pair.outer_iter() {
            h -= weighted_log(pair, transition, true);
        }
        Some(h)
    }
}

/// Σ w·v, or Σ w·ln v when `take_log`, skipping zero weights.
fn weighted_log(w: ArrayView2<f64>, v: ArrayView2<f64>, take_log: bool) -> f64 {
    w.iter()
        .zip(v.iter())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * if take_log { b.ln() } else { b })
        .sum()
}

/// Per-layer expected counts used by the collapsed and shrinkage estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// ĉ_{m,·,k} = Σ_{n,t} q(z_{t,k}).
    pub mass: Array1<f64>,
    /// ĉ_{m,0,k} = Σ_n q(z_{1,k}).
    pub initial: Array1<f64>,
    /// ĉ_{m,j,k} = Σ_{n,t} q(z_{t,j}, z_{t+1,k}).
    pub transitions: Array2<f64>,
    /// Σ_{n} Σ_{t<T_n} q(z_{t,j}).
    pub outflow: Array1<f64>,
}

/// Mean-field variational state, indexed `chains[n][m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub chains: Vec<Vec<ChainPosterior>>,
}

/// Every h set to 1, no marginals yet.
pub fn init_state(structure: &ModelStructure, data: &SequenceDataset) -> VariationalState {
    let chains = data
        .sequences
        .iter()
        .map(|seq| {
            structure
                .states()
                .iter()
                .map(|&k| ChainPosterior {
                    log_h: Array2::zeros((seq.nrows(), k)),
                    marginals: None,
                })
                .collect()
        })
        .collect();
    VariationalState { chains }
}

impl VariationalState {
    pub fn sequences(&self) -> usize {
        self.chains.len()
    }

    pub fn layers(&self) -> usize {
        self.chains.first().map_or(0, Vec::len)
    }

    pub fn marginals(&self, n: usize, m: usize) -> Result<&ChainMarginals> {
        self.chains[n][m]
            .marginals
            .as_ref()
            .ok_or(FhmmError::MissingMarginals(m))
    }

    pub fn unary(&self, n: usize, m: usize) -> Result<ArrayView2<'_, f64>> {
        Ok(self.marginals(n, m)?.unary.view())
    }

    /// Runs forward-backward on every chain with its current h.
    pub fn refresh(&mut self, estimates: &CollapsedEstimates) -> Result<()> {
        let updated: Vec<Vec<ChainMarginals>> = self
            .chains
            .par_iter()
            .enumerate()
            .map(|(n, layers)| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(m, chain)| {
                        forward_backward(
                            chain.log_h.view(),
                            estimates.initial[m].view(),
                            estimates.transition[m].view(),
                        )
                        .map_err(|e| relabel(e, n, m))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (layers, marg) in self.chains.iter_mut().zip(updated) {
            for (chain, mg) in layers.iter_mut().zip(marg) {
                chain.marginals = Some(mg);
            }
        }
        Ok(())
    }

    /// Expected counts per layer, accumulated in sequence order.
    pub fn sufficient_stats(&self) -> Result<Vec<SufficientStats>> {
        let m_layers = self.layers();
        let mut out = Vec::with_capacity(m_layers);
        for m in 0..m_layers {
            let k = self.chains[0][m].log_h.ncols();
            let mut st = SufficientStats {
                mass: Array1::zeros(k),
                initial: Array1::zeros(k),
                transitions: Array2::zeros((k, k)),
                outflow: Array1::zeros(k),
            };
            for n in 0..self.sequences() {
                let mg = self.marginals(n, m)?;
                st.mass += &mg.unary.sum_axis(Axis(0));
                st.initial += &mg.unary.row(0);
                let t_len = mg.unary.nrows();
                if t_len > 1 {
                    st.transitions += &mg.pair.sum_axis(Axis(0));
                    st.outflow += &mg.unary.slice(s![..t_len - 1, ..]).sum_axis(Axis(0));
                }
            }
            out.push(st);
        }
        Ok(out)
    }
}

fn relabel(e: FhmmError, n: usize, m: usize) -> FhmmError {
    match e {
        FhmmError::Underflow { time, .. } => FhmmError::Underflow {
            sequence: n,
            time,
            layer: m,
        },
        other => other,
    }
}

/// x_t − Σ_{l≠m} W^l q(z_t^l) − bias, using the marginals held in `prev`.
pub fn residual(
    params: &FhmmParameters,
    prev: &VariationalState,
    data: &SequenceDataset,
    n: usize,
    t: usize,
    m: usize,
) -> Result<Array1<f64>> {
    let mut r = data.sequences[n].row(t).to_owned() - &params.bias;
    for (l, layer) in params.layers.iter().enumerate() {
        if l == m {
            continue;
        }
        let q = prev.unary(n, l)?;
        r -= &layer.weights.dot(&q.row(t));
    }
    Ok(r)
}

/// log h = log δ + W^⊤ C⁻¹ x̃ − ½ Λ, with Λ the diagonal of W^⊤ C⁻¹ W.
pub fn log_variational_bias(
    weights: ArrayView2<f64>,
    inv_cov: ArrayView1<f64>,
    log_delta: ArrayView1<f64>,
    residual: ArrayView1<f64>,
) -> Array1<f64> {
    let scaled = &residual * &inv_cov;
    let mut out = weights.t().dot(&scaled);
    for (k, o) in out.iter_mut().enumerate() {
        let col = weights.column(k);
        let lambda: f64 = col.iter().zip(inv_cov).map(|(w, c)| w * w * c).sum();
        *o += log_delta[k] - 0.5 * lambda;
    }
    out
}

/// h = diag(δ) exp{W^⊤ C⁻¹ x̃ − ½ Λ}. The forward-backward pass works from
/// [`log_variational_bias`] with a per-step max shift; q does not depend on
/// that scaling.
pub fn update_h(
    weights: ArrayView2<f64>,
    covariance: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    residual: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if covariance.iter().any(|&c| !(c > 0.0)) {
        return Err(FhmmError::Parameter("covariance must be positive".into()));
    }
    let inv_cov = covariance.mapv(|c| 1.0 / c);
    let log_delta = delta.mapv(f64::ln);
    Ok(log_variational_bias(weights, inv_cov.view(), log_delta.view(), residual).mapv(f64::exp))
}

/// Scaled forward-backward recursion for a chain with potentials
/// h_t(k)·α̂(k) at t = 1 and h_t(k)·β̂(j, k) afterwards.
pub fn forward_backward(
    log_h: ArrayView2<f64>,
    initial: ArrayView1<f64>,
    transition: ArrayView2<f64>,
) -> Result<ChainMarginals> {
    let (t_len, k) = log_h.dim();
    if initial.len() != k || transition.dim() != (k, k) {
        return Err(FhmmError::Shape(format!(
            "biases have {k} states, estimates have {} / {:?}",
            initial.len(),
            transition.dim()
        )));
    }
    let underflow = |time| FhmmError::Underflow {
        sequence: 0,
        time,
        layer: 0,
    };

    // h scaled so that max_k h_t(k) = 1.
    let mut h = Array2::zeros((t_len, k));
    let mut shift = Array1::zeros(t_len);
    for t in 0..t_len {
        let row = log_h.row(t);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(underflow(t));
        }
        shift[t] = mx;
        for j in 0..k {
            h[[t, j]] = (row[j] - mx).exp();
        }
    }

    let mut forward = Array2::zeros((t_len, k));
    let mut zeta = Array1::zeros(t_len);
    for t in 0..t_len {
        let mut total = 0.0;
        for j in 0..k {
            let pred = if t == 0 {
                initial[j]
            } else {
                (0..k).map(|i| forward[[t - 1, i]] * transition[[i, j]]).sum()
            };
            let v = h[[t, j]] * pred;
            forward[[t, j]] = v;
            total += v;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(underflow(t));
        }
        forward.row_mut(t).mapv_inplace(|v| v / total);
        zeta[t] = total;
    }

    let mut backward = Array2::ones((t_len, k));
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..k {
            let acc: f64 = (0..k)
                .map(|j| transition[[i, j]] * h[[t + 1, j]] * backward[[t + 1, j]])
                .sum();
            backward[[t, i]] = acc / zeta[t + 1];
        }
    }

    let unary = &forward * &backward;
    let mut pair = Array3::zeros((t_len.saturating_sub(1), k, k));
    for t in 1..t_len {
        for i in 0..k {
            let f = forward[[t - 1, i]];
            for j in 0..k {
                pair[[t - 1, i, j]] = f * transition[[i, j]] * h[[t, j]] * backward[[t, j]] / zeta[t];
            }
        }
    }
    let log_zeta = Array1::from_shape_fn(t_len, |t| zeta[t].ln() + shift[t]);
    Ok(ChainMarginals {
        forward,
        backward,
        log_zeta,
        unary,
        pair,
    })
}

/// One mean-field sweep. Every layer's residual is taken against the
/// marginals in `prev`, so the result does not depend on layer order.
pub fn estep_sweep(
    params: &FhmmParameters,
    log_delta: &[Array1<f64>],
    estimates: &CollapsedEstimates,
    data: &SequenceDataset,
    prev: &VariationalState,
) -> Result<VariationalState> {
    let m_layers = params.layers.len();
    if log_delta.len() != m_layers || estimates.layers() != m_layers || prev.layers() != m_layers {
        return Err(FhmmError::Shape(format!(
            "layer counts disagree: params {m_layers}, delta {}, estimates {}, state {}",
            log_delta.len(),
            estimates.layers(),
            prev.layers()
        )));
    }
    if prev.sequences() != data.len() {
        return Err(FhmmError::Shape("state and dataset sequence counts differ".into()));
    }
    if params.covariance.iter().any(|&c| !(c > 0.0)) {
        return Err(FhmmError::Parameter("covariance must be positive".into()));
    }
    let inv_cov = params.covariance.mapv(|c| 1.0 / c);

    let chains = data
        .sequences
        .par_iter()
        .enumerate()
        .map(|(n, x)| -> Result<Vec<ChainPosterior>> {
            let t_len = x.nrows();
            // Full expected mean under prev; each layer adds its own part back.
            let mut mean = Array2::zeros(x.dim());
            mean += &params.bias;
            let mut parts = Vec::with_capacity(m_layers);
            for (m, layer) in params.layers.iter().enumerate() {
                let q = prev.unary(n, m)?;
                let part = q.dot(&layer.weights.t());
                mean += &part;
                parts.push(part);
            }
            let base = x - &mean;
            (0..m_layers)
                .map(|m| {
                    let layer = &params.layers[m];
                    let resid = &base + &parts[m];
                    let mut log_h = Array2::zeros((t_len, layer.states()));
                    for t in 0..t_len {
                        log_h.row_mut(t).assign(&log_variational_bias(
                            layer.weights.view(),
                            inv_cov.view(),
                            log_delta[m].view(),
                            resid.row(t),
                        ));
                    }
                    let mg = forward_backward(
                        log_h.view(),
                        estimates.initial[m].view(),
                        estimates.transition[m].view(),
                    )
                    .map_err(|e| relabel(e, n, m))?;
                    Ok(ChainPosterior {
                        log_h,
                        marginals: Some(mg),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalState { chains })
}
