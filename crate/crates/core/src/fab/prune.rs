//! Removal of low-mass states and of layers left with a single state.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::Serialize;

use crate::error::{FhmmError, Result};
use crate::model::FhmmParameters;
use crate::variational::{ChainMarginals, CollapsedEstimates, VariationalState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneEvent {
    /// Layer index before any layer of this pass was removed.
    pub layer: usize,
    /// State index within that layer before pruning.
    pub state: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PruneOutcome {
    pub removed_states: Vec<PruneEvent>,
    /// Layers (pre-pass indices) folded into the bias.
    pub removed_layers: Vec<usize>,
}

impl PruneOutcome {
    pub fn is_empty(&self) -> bool {
        self.removed_states.is_empty() && self.removed_layers.is_empty()
    }
}

fn renormalize(mut v: Array1<f64>) -> Array1<f64> {
    let s = v.sum();
    if s > 0.0 {
        v /= s;
    } else {
        let u = 1.0 / v.len() as f64;
        v.fill(u);
    }
    v
}

fn select_vector(v: &Array1<f64>, keep: &[usize]) -> Array1<f64> {
    keep.iter().map(|&k| v[k]).collect()
}

fn select_square(b: &Array2<f64>, keep: &[usize]) -> Array2<f64> {
    let mut out = Array2::from_shape_fn((keep.len(), keep.len()), |(i, j)| b[[keep[i], keep[j]]]);
    for mut row in out.rows_mut() {
        let r = renormalize(row.to_owned());
        row.assign(&r);
    }
    out
}

fn select_marginals(mg: &ChainMarginals, keep: &[usize]) -> ChainMarginals {
    let unary_raw = mg.unary.select(Axis(1), keep);
    let mut unary = Array2::zeros(unary_raw.dim());
    for (t, row) in unary_raw.rows().into_iter().enumerate() {
        unary.row_mut(t).assign(&renormalize(row.to_owned()));
    }
    let t_pairs = mg.pair.shape()[0];
    let mut pair = Array3::zeros((t_pairs, keep.len(), keep.len()));
    for t in 0..t_pairs {
        let mut total = 0.0;
        for (i, &a) in keep.iter().enumerate() {
            for (j, &b) in keep.iter().enumerate() {
                let v = mg.pair[[t, a, b]];
                pair[[t, i, j]] = v;
                total += v;
            }
        }
        let k = keep.len() as f64;
        for v in pair.slice_mut(ndarray::s![t, .., ..]).iter_mut() {
            *v = if total > 0.0 { *v / total } else { 1.0 / (k * k) };
        }
    }
    ChainMarginals {
        forward: mg.forward.select(Axis(1), keep),
        backward: mg.backward.select(Axis(1), keep),
        log_zeta: mg.log_zeta.clone(),
        unary,
        pair,
    }
}

/// Drops every state whose total expected occupancy Σ_{n,t} q(z_{t,k}) is
/// below `threshold`, renormalizing what remains. A layer is never emptied:
/// if all of its states fall below the threshold the largest one is kept.
/// Layers left with one state are folded into the bias, except that the last
/// remaining layer is kept.
pub fn prune(
    params: &mut FhmmParameters,
    state: &mut VariationalState,
    estimates: &mut CollapsedEstimates,
    threshold: f64,
) -> Result<PruneOutcome> {
    if !(threshold > 0.0) {
        return Err(FhmmError::Parameter("prune threshold must be positive".into()));
    }
    let stats = state.sufficient_stats()?;
    let mut outcome = PruneOutcome::default();
    for (m, st) in stats.iter().enumerate() {
        let mut keep: Vec<usize> = (0..st.mass.len()).filter(|&k| st.mass[k] >= threshold).collect();
        if keep.is_empty() {
            let best = st
                .mass
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &c)| if c > acc.1 { (k, c) } else { acc })
                .0;
            keep.push(best);
        }
        if keep.len() == st.mass.len() {
            continue;
        }
        for k in (0..st.mass.len()).filter(|k| !keep.contains(k)) {
            outcome.removed_states.push(PruneEvent {
                layer: m,
                state: k,
                mass: st.mass[k],
            });
        }
        let layer = &mut params.layers[m];
        layer.weights = layer.weights.select(Axis(1), &keep);
        layer.initial = renormalize(select_vector(&layer.initial, &keep));
        layer.transition = select_square(&layer.transition, &keep);
        estimates.initial[m] = renormalize(select_vector(&estimates.initial[m], &keep));
        estimates.transition[m] = select_square(&estimates.transition[m], &keep);
        for chains in state.chains.iter_mut() {
            let chain = &mut chains[m];
            chain.log_h = chain.log_h.select(Axis(1), &keep);
            if let Some(mg) = chain.marginals.as_ref() {
                chain.marginals = Some(select_marginals(mg, &keep));
            }
        }
    }

    let mut single: Vec<usize> = (0..params.layers.len())
        .filter(|&m| params.layers[m].states() == 1)
        .collect();
    if single.len() == params.layers.len() {
        single.pop();
    }
    for &m in single.iter().rev() {
        let layer = params.layers.remove(m);
        params.bias += &layer.weights.column(0);
        estimates.initial.remove(m);
        estimates.transition.remove(m);
        for chains in state.chains.iter_mut() {
            chains.remove(m);
        }
    }
    outcome.removed_layers = single;
    Ok(outcome)
}
