//! The EM driver shared by all variants.

use log::{debug, info};
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bound::{fic_bound, FicTerms};
use super::mstep::{mstep, COVARIANCE_FLOOR};
use super::prune::{prune, PruneOutcome};
use super::shrinkage::{noncollapsed_estimates, shrinkage_factors, smoothed_estimates, ShrinkageFactors};
use super::Variant;
use crate::error::{FhmmError, Result};
use crate::flat::DEFAULT_PRODUCT_CAP;
use crate::model::{FhmmParameters, Layer, ModelStructure, SequenceDataset};
use crate::simulate::{dirichlet, stream_rng};
use crate::variational::{estep_sweep, init_state, CollapsedEstimates, SufficientStats, VariationalState};

/// RNG stream used for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub variant: Variant,
    pub max_iters: usize,
    /// States whose expected occupancy falls below this are removed.
    pub prune_threshold: f64,
    /// Relative change of 𝒢 regarded as converged.
    pub convergence_tol: f64,
    /// Consecutive converged iterations required to stop.
    pub patience: usize,
    pub seed: u64,
    pub product_cap: usize,
    /// Symmetric Dirichlet strength for the VB transition estimates.
    pub concentration: f64,
    /// Prior count added to every α̂ and β̂ entry by the collapsed
    /// estimator; 1 corresponds to uniform Dirichlet priors.
    pub pseudocount: f64,
    /// Spread of the initial weights around the data mean, in data standard
    /// deviations.
    pub init_jitter: f64,
    /// Dirichlet concentration of the initial α̂ and β̂ rows.
    pub init_concentration: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Rfab,
            max_iters: 1000,
            prune_threshold: 1.0,
            convergence_tol: 1e-6,
            patience: 3,
            seed: 0,
            product_cap: DEFAULT_PRODUCT_CAP,
            concentration: 1.0,
            pseudocount: 1.0,
            init_jitter: 0.5,
            init_concentration: 10.0,
        }
    }
}

impl FitConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.prune_threshold > 0.0) {
            return Err(FhmmError::Parameter("prune threshold must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(FhmmError::Parameter("max_iters must be at least 1".into()));
        }
        if !(self.concentration > 0.0) || !(self.init_concentration > 0.0) {
            return Err(FhmmError::Parameter("concentrations must be positive".into()));
        }
        if !(self.pseudocount >= 0.0) {
            return Err(FhmmError::Parameter("pseudocount must be non-negative".into()));
        }
        if !(self.convergence_tol >= 0.0) || !(self.init_jitter >= 0.0) {
            return Err(FhmmError::Parameter("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub iteration: usize,
    pub terms: FicTerms,
    /// Live states per layer after pruning.
    pub states: Vec<usize>,
    pub pruned: PruneOutcome,
}

impl IterationRecord {
    pub fn pruned_states(&self) -> usize {
        self.pruned.removed_states.len()
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub variant: Variant,
    pub trace: Vec<IterationRecord>,
    /// Final parameters; α and β hold the final estimates α̂, β̂.
    pub params: FhmmParameters,
    pub estimates: CollapsedEstimates,
    pub state: VariationalState,
    pub fic_score: f64,
    pub converged: bool,
    /// Last iteration that removed a state or layer (0 if none did).
    pub final_structure_iteration: usize,
}

impl FitReport {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn states(&self) -> Vec<usize> {
        self.params.layers.iter().map(Layer::states).collect()
    }
}

/// Starting point: weights spread around (data mean)/M, covariance equal to
/// the data variance, α̂ and β̂ rows drawn near uniform.
pub fn initialize(
    data: &SequenceDataset,
    structure: &ModelStructure,
    config: &FitConfig,
) -> Result<(FhmmParameters, CollapsedEstimates)> {
    if structure.dim() != data.dim() {
        return Err(FhmmError::Shape(format!(
            "structure has D={}, data has D={}",
            structure.dim(),
            data.dim()
        )));
    }
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    let mut all = Array2::zeros((0, data.dim()));
    for seq in &data.sequences {
        all.append(Axis(0), seq.view()).expect("dimensions checked");
    }
    let mean = all.mean_axis(Axis(0)).expect("non-empty data");
    let var = all.var_axis(Axis(0), 0.0).mapv(|v| v.max(COVARIANCE_FLOOR));
    let sd = var.mapv(f64::sqrt);
    let m_layers = structure.layers() as f64;

    let layers = structure
        .states()
        .iter()
        .map(|&k| {
            let initial = dirichlet(&mut rng, config.init_concentration, k);
            let mut transition = Array2::zeros((k, k));
            for mut row in transition.rows_mut() {
                row.assign(&dirichlet(&mut rng, config.init_concentration, k));
            }
            let weights = Array2::from_shape_fn((data.dim(), k), |(d, _)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                mean[d] / m_layers + config.init_jitter * sd[d] * e
            });
            Layer {
                initial,
                transition,
                weights,
            }
        })
        .collect();
    let params = FhmmParameters {
        layers,
        covariance: var,
        bias: Array1::zeros(data.dim()),
    };
    let estimates = CollapsedEstimates::from_params(&params);
    Ok((params, estimates))
}

/// α̂, β̂ and δ for the next E-step, computed from the current marginals.
fn variant_estimates(
    config: &FitConfig,
    stats: &[SufficientStats],
    data: &SequenceDataset,
) -> Result<(CollapsedEstimates, ShrinkageFactors)> {
    match config.variant {
        Variant::Rfab => Ok((
            smoothed_estimates(stats, data.len(), config.pseudocount),
            shrinkage_factors(stats, data.dim())?,
        )),
        Variant::Fab => noncollapsed_estimates(stats, data.dim()),
        Variant::Vb => Ok((
            smoothed_estimates(stats, data.len(), config.concentration),
            ShrinkageFactors::uniform(stats.iter().map(|s| s.mass.clone()).collect()),
        )),
    }
}

/// Step-by-step EM state. Each [`step`](FabSession::step) runs one full
/// iteration: E-step sweep with the pending estimates, M-step, pruning and
/// evaluation of 𝒢.
#[derive(Debug, Clone)]
pub struct FabSession<'a> {
    data: &'a SequenceDataset,
    config: FitConfig,
    pub params: FhmmParameters,
    pub state: VariationalState,
    /// α̂, β̂ that the next E-step will use.
    pub estimates: CollapsedEstimates,
    /// δ that the next E-step will use.
    pub shrinkage: ShrinkageFactors,
    iteration: usize,
    fit_bias: bool,
}

impl<'a> FabSession<'a> {
    /// Sets every h to 1 and runs forward-backward with `estimates`. The
    /// first iteration uses `estimates` as given and δ from these marginals.
    pub fn new(
        data: &'a SequenceDataset,
        params: FhmmParameters,
        estimates: CollapsedEstimates,
        config: FitConfig,
    ) -> Result<Self> {
        config.check()?;
        params.check()?;
        let structure = params.structure();
        if structure.dim() != data.dim() {
            return Err(FhmmError::Shape("parameters and data differ in dimension".into()));
        }
        if estimates.layers() != structure.layers() {
            return Err(FhmmError::Shape("estimates and parameters differ in layer count".into()));
        }
        let mut state = init_state(&structure, data);
        state.refresh(&estimates)?;
        let stats = state.sufficient_stats()?;
        let (_, shrinkage) = variant_estimates(&config, &stats, data)?;
        let fit_bias = params.bias.iter().any(|&b| b != 0.0);
        Ok(Self {
            data,
            config,
            params,
            state,
            estimates,
            shrinkage,
            iteration: 0,
            fit_bias,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn step(&mut self) -> Result<IterationRecord> {
        let at = self.iteration + 1;
        self.step_inner().map_err(|e| FhmmError::AtIteration {
            iteration: at,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self) -> Result<IterationRecord> {
        let data = self.data;
        let variant = self.config.variant;
        let next = estep_sweep(&self.params, &self.shrinkage.log_delta, &self.estimates, data, &self.state)?;
        self.state = next;

        let m = mstep(&self.state, data, self.fit_bias)?;
        for (layer, w) in self.params.layers.iter_mut().zip(m.weights) {
            layer.weights = w;
        }
        self.params.covariance = m.covariance;
        if self.fit_bias {
            self.params.bias = m.bias;
        }

        let pruned = prune(
            &mut self.params,
            &mut self.state,
            &mut self.estimates,
            self.config.prune_threshold,
        )?;
        if !pruned.removed_layers.is_empty() {
            self.fit_bias = true;
        }

        let stats = self.state.sufficient_stats()?;
        let (estimates, shrinkage) = variant_estimates(&self.config, &stats, data)?;
        let terms = fic_bound(&self.params, &self.state, &stats, &shrinkage, &estimates, data, variant)?;
        for (layer, (a, b)) in self
            .params
            .layers
            .iter_mut()
            .zip(estimates.initial.iter().zip(&estimates.transition))
        {
            layer.initial = a.clone();
            layer.transition = b.clone();
        }
        self.estimates = estimates;
        self.shrinkage = shrinkage;
        self.iteration += 1;

        let states = self.params.layers.iter().map(Layer::states).collect();
        if !pruned.is_empty() {
            debug!(
                "iteration {}: removed {} states, {} layers; now {:?}",
                self.iteration,
                pruned.removed_states.len(),
                pruned.removed_layers.len(),
                states
            );
        }
        Ok(IterationRecord {
            iteration: self.iteration,
            terms,
            states,
            pruned,
        })
    }
}

/// Runs EM from the given starting point until 𝒢 settles or `max_iters`.
pub fn fit_from(
    data: &SequenceDataset,
    params: FhmmParameters,
    estimates: CollapsedEstimates,
    config: &FitConfig,
) -> Result<FitReport> {
    let mut session = FabSession::new(data, params, estimates, config.clone())?;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut streak = 0;
    let mut converged = false;
    while session.iteration() < config.max_iters {
        let rec = session.step()?;
        if !rec.pruned.is_empty() {
            streak = 0;
        } else if let Some(prev) = trace.last() {
            let (g0, g1) = (prev.terms.total, rec.terms.total);
            let rel = (g1 - g0).abs() / g0.abs().max(f64::MIN_POSITIVE);
            if rel < config.convergence_tol {
                streak += 1;
            } else {
                streak = 0;
            }
        }
        trace.push(rec);
        if streak >= config.patience {
            converged = true;
            break;
        }
    }
    let last = trace.last().expect("max_iters >= 1");
    let fic_score = last.terms.total;
    let final_structure_iteration = trace
        .iter()
        .rev()
        .find(|r| !r.pruned.is_empty())
        .map_or(0, |r| r.iteration);
    info!(
        "{} finished after {} iterations (converged: {converged}), states {:?}, G = {fic_score:.3}",
        config.variant,
        trace.len(),
        last.states
    );
    Ok(FitReport {
        variant: config.variant,
        trace,
        params: session.params,
        estimates: session.estimates,
        state: session.state,
        fic_score,
        converged,
        final_structure_iteration,
    })
}

/// Initializes from `structure` and runs EM.
pub fn fit(data: &SequenceDataset, structure: &ModelStructure, config: &FitConfig) -> Result<FitReport> {
    let (params, estimates) = initialize(data, structure, config)?;
    fit_from(data, params, estimates, config)
}

/// 𝒢 of a fixed model on `data`: E-step sweeps with the variant's δ and
/// α̂, β̂ re-estimated from the marginals, without M-step or pruning, until 𝒢
/// changes by less than `config.convergence_tol` (relative) or `max_iters`.
pub fn score(data: &SequenceDataset, params: &FhmmParameters, config: &FitConfig) -> Result<FicTerms> {
    let estimates = CollapsedEstimates::from_params(params);
    let mut session = FabSession::new(data, params.clone(), estimates, config.clone())?;
    let mut last: Option<FicTerms> = None;
    for _ in 0..config.max_iters {
        let state = estep_sweep(&session.params, &session.shrinkage.log_delta, &session.estimates, data, &session.state)?;
        session.state = state;
        let stats = session.state.sufficient_stats()?;
        let (estimates, shrinkage) = variant_estimates(config, &stats, data)?;
        let terms = fic_bound(&session.params, &session.state, &stats, &shrinkage, &estimates, data, config.variant)?;
        session.estimates = estimates;
        session.shrinkage = shrinkage;
        if let Some(prev) = last {
            if (terms.total - prev.total).abs() <= config.convergence_tol * prev.total.abs() {
                return Ok(terms);
            }
        }
        last = Some(terms);
    }
    Ok(last.expect("max_iters >= 1"))
}
