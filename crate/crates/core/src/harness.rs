//! Multi-trial synthetic experiments: fresh ground truth per trial, every
//! variant fitted on the training sequence, held-out evaluation, and the
//! aggregate tables and iteration traces written as CSV.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array1;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};
use crate::fab::bound::{entropy, expected_loglik, markov_term};
use crate::fab::{fit, FitConfig, FitReport, Variant};
use crate::flat::exact_log_likelihood;
use crate::io::{save_model, write_trace};
use crate::model::{FhmmParameters, ModelStructure, SequenceDataset};
use crate::simulate::{paper_ground_truth, random_parameters, sample, stream_rng, SimulationConfig};
use crate::variational::{estep_sweep, init_state, CollapsedEstimates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Three layers with (2, 2, 3) states, D = 3, C = 0.4 I.
    Paper,
    /// Random ground truth with `truth_states` and `dim`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub variants: Vec<Variant>,
    pub trials: usize,
    pub seed: u64,
    pub train_len: usize,
    pub test_len: usize,
    pub init_layers: usize,
    pub init_states: usize,
    /// Ground-truth layer sizes for the custom preset.
    pub truth_states: Vec<usize>,
    /// Observation dimension for the custom preset.
    pub dim: usize,
    /// Settings shared by every fit; the variant field is overridden.
    pub fit: FitConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Paper,
            variants: Variant::ALL.to_vec(),
            trials: 10,
            seed: 0,
            train_len: 2000,
            test_len: 2000,
            init_layers: 3,
            init_states: 10,
            truth_states: vec![2, 2, 3],
            dim: 3,
            fit: FitConfig::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(FhmmError::Parameter("trials must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(FhmmError::Parameter("no variants selected".into()));
        }
        if self.train_len == 0 || self.test_len == 0 || self.init_layers == 0 || self.init_states == 0 {
            return Err(FhmmError::Parameter("lengths and initial sizes must be positive".into()));
        }
        self.fit.check()
    }

    fn truth(&self, seed: u64) -> Result<FhmmParameters> {
        match self.preset {
            Preset::Paper => Ok(paper_ground_truth(seed)),
            Preset::Custom => Ok(random_parameters(
                &ModelStructure::new(self.truth_states.clone(), self.dim)?,
                seed,
            )),
        }
    }

    fn dim_of_truth(&self) -> usize {
        match self.preset {
            Preset::Paper => 3,
            Preset::Custom => self.dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMethod {
    /// Forward algorithm on the product-state HMM.
    Exact,
    /// Mean-field lower bound with parameters held fixed.
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub loglik: f64,
    pub method: EvalMethod,
}

const BOUND_SWEEPS: usize = 200;

/// Mean-field lower bound on log p(data) with parameters fixed: E-step sweeps
/// from uniform marginals, keeping the best bound reached.
pub fn variational_loglik(params: &FhmmParameters, estimates: &CollapsedEstimates, data: &SequenceDataset) -> Result<f64> {
    let mut state = init_state(&params.structure(), data);
    state.refresh(estimates)?;
    let log_delta: Vec<Array1<f64>> = params.layers.iter().map(|l| Array1::zeros(l.states())).collect();
    let mut best = f64::NEG_INFINITY;
    let mut last = f64::NEG_INFINITY;
    for _ in 0..BOUND_SWEEPS {
        state = estep_sweep(params, &log_delta, estimates, data, &state)?;
        let b = expected_loglik(params, &state, data)? + markov_term(&state, estimates)? + entropy(&state)?;
        best = best.max(b);
        if (b - last).abs() <= 1e-12 * b.abs() {
            break;
        }
        last = b;
    }
    Ok(best)
}

/// Held-out log-likelihood under `params` with α, β replaced by `estimates`:
/// exact when the product state space fits in `cap`, otherwise the
/// mean-field bound.
pub fn eval_heldout(
    params: &FhmmParameters,
    estimates: &CollapsedEstimates,
    test: &SequenceDataset,
    cap: usize,
) -> Result<HeldOut> {
    let mut model = params.clone();
    for (layer, (a, b)) in model.layers.iter_mut().zip(estimates.initial.iter().zip(&estimates.transition)) {
        layer.initial = a.clone();
        layer.transition = b.clone();
    }
    if model.structure().joint_states() <= cap {
        let mut total = 0.0;
        for n in 0..test.len() {
            total += exact_log_likelihood(&model, test.sequence(n), cap)?;
        }
        Ok(HeldOut {
            loglik: total,
            method: EvalMethod::Exact,
        })
    } else {
        Ok(HeldOut {
            loglik: variational_loglik(&model, estimates, test)?,
            method: EvalMethod::Bound,
        })
    }
}

/// One fitted variant in one trial; this is what `report.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub variant: Variant,
    /// Surviving states per layer sorted ascending, padded with 1 for
    /// layers folded into the bias.
    pub sorted_states: Vec<usize>,
    pub iterations: usize,
    pub final_structure_iteration: usize,
    pub converged: bool,
    pub fic_score: f64,
    pub train_bound: f64,
    pub train_loglik: f64,
    pub test_loglik: f64,
    pub method: EvalMethod,
    pub truth_train_loglik: f64,
    pub truth_test_loglik: f64,
}

/// A trial/variant that did not finish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub variant: Variant,
    pub error: String,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub completed: usize,
    pub failed: usize,
    /// Mean and standard deviation of each sorted state-count position.
    pub states_mean: Vec<f64>,
    pub states_sd: Vec<f64>,
    pub total_mean: f64,
    pub total_sd: f64,
    pub train_mean: f64,
    pub train_sd: f64,
    pub test_mean: f64,
    pub test_sd: f64,
    pub bound_evaluations: usize,
    pub iterations_mean: f64,
    pub final_structure_iteration_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub rows: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
    pub summaries: Vec<VariantSummary>,
}

impl ResultTable {
    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &TrialResult> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }
}

/// Averages over completed trials per variant; a pure function of the rows.
pub fn aggregate(rows: Vec<TrialResult>, failures: Vec<TrialFailure>, variants: &[Variant]) -> ResultTable {
    let summaries = variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&TrialResult> = rows.iter().filter(|r| r.variant == variant).collect();
            let width = mine.iter().map(|r| r.sorted_states.len()).max().unwrap_or(0);
            let (states_mean, states_sd) = (0..width)
                .map(|i| {
                    let v: Vec<f64> = mine
                        .iter()
                        .map(|r| r.sorted_states.get(i).copied().unwrap_or(1) as f64)
                        .collect();
                    mean_sd(&v)
                })
                .unzip();
            let pick = |f: fn(&TrialResult) -> f64| mean_sd(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (total_mean, total_sd) = pick(|r| r.sorted_states.iter().sum::<usize>() as f64);
            let (train_mean, train_sd) = pick(|r| r.train_loglik);
            let (test_mean, test_sd) = pick(|r| r.test_loglik);
            VariantSummary {
                variant,
                completed: mine.len(),
                failed: failures.iter().filter(|f| f.variant == variant).count(),
                states_mean,
                states_sd,
                total_mean,
                total_sd,
                train_mean,
                train_sd,
                test_mean,
                test_sd,
                bound_evaluations: mine.iter().filter(|r| r.method == EvalMethod::Bound).count(),
                iterations_mean: pick(|r| r.iterations as f64).0,
                final_structure_iteration_mean: pick(|r| r.final_structure_iteration as f64).0,
            }
        })
        .collect();
    ResultTable {
        rows,
        failures,
        summaries,
    }
}

struct TrialOutput {
    results: Vec<(TrialResult, FitReport)>,
    failures: Vec<TrialFailure>,
}

fn sorted_states(report: &FitReport, width: usize) -> Vec<usize> {
    let mut s = report.states();
    s.resize(width.max(s.len()), 1);
    s.sort_unstable();
    s
}

fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialOutput> {
    let mut rng = stream_rng(config.seed, 0x7121 + trial as u64);
    let (truth_seed, data_seed, fit_seed) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
    let truth = config.truth(truth_seed)?;
    let (data, _) = sample(&SimulationConfig::new(truth.clone(), vec![config.train_len, config.test_len], data_seed))?;
    let train = SequenceDataset::new(vec![data.sequences[0].clone()])?;
    let test = SequenceDataset::new(vec![data.sequences[1].clone()])?;
    let cap = config.fit.product_cap;
    let truth_est = CollapsedEstimates::from_params(&truth);
    let truth_train = eval_heldout(&truth, &truth_est, &train, cap)?.loglik;
    let truth_test = eval_heldout(&truth, &truth_est, &test, cap)?.loglik;
    let structure = ModelStructure::new(vec![config.init_states; config.init_layers], config.dim_of_truth())?;

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &variant in &config.variants {
        let fit_config = FitConfig {
            variant,
            seed: fit_seed,
            ..config.fit.clone()
        };
        let outcome = fit(&train, &structure, &fit_config).and_then(|report| {
            let train_eval = eval_heldout(&report.params, &report.estimates, &train, cap)?;
            let test_eval = eval_heldout(&report.params, &report.estimates, &test, cap)?;
            let last = report.trace.last().expect("at least one iteration");
            let row = TrialResult {
                trial,
                variant,
                sorted_states: sorted_states(&report, config.init_layers),
                iterations: report.iterations(),
                final_structure_iteration: report.final_structure_iteration,
                converged: report.converged,
                fic_score: report.fic_score,
                train_bound: last.terms.variational_bound(),
                train_loglik: train_eval.loglik,
                test_loglik: test_eval.loglik,
                method: if train_eval.method == EvalMethod::Bound || test_eval.method == EvalMethod::Bound {
                    EvalMethod::Bound
                } else {
                    EvalMethod::Exact
                },
                truth_train_loglik: truth_train,
                truth_test_loglik: truth_test,
            };
            Ok((row, report))
        });
        match outcome {
            Ok(pair) => {
                info!(
                    "trial {trial} {variant}: states {:?}, test log-likelihood {:.1}",
                    pair.0.sorted_states, pair.0.test_loglik
                );
                results.push(pair);
            }
            Err(e) => {
                warn!("trial {trial} {variant} failed: {e}");
                failures.push(TrialFailure {
                    trial,
                    variant,
                    error: e.to_string(),
                });
            }
        }
    }
    if let Some(dir) = &config.out_dir {
        write_trial_artifacts(dir, config, trial, &truth, &results, &failures)?;
    }
    Ok(TrialOutput { results, failures })
}

fn write_trial_artifacts(
    dir: &Path,
    config: &ExperimentConfig,
    trial: usize,
    truth: &FhmmParameters,
    results: &[(TrialResult, FitReport)],
    failures: &[TrialFailure],
) -> Result<()> {
    let trial_dir = dir.join(format!("trial_{trial}"));
    fs::create_dir_all(&trial_dir)?;
    save_model(&trial_dir.join("truth.json"), truth)?;
    for (row, report) in results {
        let vdir = trial_dir.join(row.variant.name());
        fs::create_dir_all(&vdir)?;
        save_model(&vdir.join("model.json"), &report.params)?;
        write_trace(&vdir.join("trace.csv"), report, config.init_layers)?;
        fs::write(vdir.join("report.json"), serde_json::to_string_pretty(row)?)?;
    }
    for f in failures {
        let vdir = trial_dir.join(f.variant.name());
        fs::create_dir_all(&vdir)?;
        fs::write(vdir.join("error.json"), serde_json::to_string_pretty(f)?)?;
    }
    Ok(())
}

/// Runs every trial (in parallel), aggregates, and writes the tables and
/// per-iteration traces when an output directory is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    config.check()?;
    let outputs: Vec<(usize, Result<TrialOutput>)> = (0..config.trials)
        .into_par_iter()
        .map(|trial| (trial, run_trial(config, trial)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (trial, out) in outputs {
        match out {
            Ok(o) => {
                for (row, report) in o.results {
                    traces.push((row.trial, row.variant, report.trace));
                    rows.push(row);
                }
                failures.extend(o.failures);
            }
            Err(e) => {
                warn!("trial {trial} failed before fitting: {e}");
                failures.extend(config.variants.iter().map(|&variant| TrialFailure {
                    trial,
                    variant,
                    error: e.to_string(),
                }));
            }
        }
    }
    let table = aggregate(rows, failures, &config.variants);
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        write_tables(dir, &table)?;
        write_figures(dir, config.init_layers, &traces)?;
    }
    Ok(table)
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// `table1.csv` (sorted state counts) and `table2.csv` (log-likelihoods).
pub fn write_tables(dir: &Path, table: &ResultTable) -> Result<()> {
    let width = table.summaries.iter().map(|s| s.states_mean.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join("table1.csv"))?;
    let mut header = vec!["variant".to_string(), "completed".into(), "failed".into()];
    for i in 1..=width {
        header.push(format!("K_{i}_mean"));
        header.push(format!("K_{i}_sd"));
    }
    header.extend(["total_mean".into(), "total_sd".into()]);
    w.write_record(&header)?;
    for s in &table.summaries {
        let mut rec = vec![s.variant.name().to_string(), s.completed.to_string(), s.failed.to_string()];
        for i in 0..width {
            rec.push(s.states_mean.get(i).copied().map_or(String::new(), fmt));
            rec.push(s.states_sd.get(i).copied().map_or(String::new(), fmt));
        }
        rec.extend([fmt(s.total_mean), fmt(s.total_sd)]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("table2.csv"))?;
    w.write_record([
        "variant",
        "completed",
        "train_mean",
        "train_sd",
        "test_mean",
        "test_sd",
        "bound_evaluations",
    ])?;
    for s in &table.summaries {
        w.write_record([
            s.variant.name().to_string(),
            s.completed.to_string(),
            fmt(s.train_mean),
            fmt(s.train_sd),
            fmt(s.test_mean),
            fmt(s.test_sd),
            s.bound_evaluations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `fig2_states.csv` (states per layer by iteration) and `fig3_trainll.csv`
/// (𝒢 and the variational bound on the training data by iteration).
fn write_figures(dir: &Path, width: usize, traces: &[(usize, Variant, Vec<crate::fab::IterationRecord>)]) -> Result<()> {
    let mut states = csv::Writer::from_path(dir.join("fig2_states.csv"))?;
    let mut header = vec!["trial".to_string(), "variant".into(), "iter".into()];
    header.extend((1..=width).map(|m| format!("K_{m}")));
    header.push("total".into());
    states.write_record(&header)?;
    let mut ll = csv::Writer::from_path(dir.join("fig3_trainll.csv"))?;
    ll.write_record(["trial", "variant", "iter", "G", "variational_bound"])?;
    for (trial, variant, trace) in traces {
        for rec in trace {
            let mut row = vec![trial.to_string(), variant.name().to_string(), rec.iteration.to_string()];
            row.extend((0..width).map(|m| rec.states.get(m).copied().unwrap_or(1).to_string()));
            row.push(rec.states.iter().sum::<usize>().to_string());
            states.write_record(&row)?;
            ll.write_record([
                trial.to_string(),
                variant.name().to_string(),
                rec.iteration.to_string(),
                fmt(rec.terms.total),
                fmt(rec.terms.variational_bound()),
            ])?;
        }
    }
    states.flush()?;
    ll.flush()?;
    Ok(())
}

/// Re-reads every `trial_<i>/<variant>/report.json` under `dir` and
/// aggregates them.
pub fn aggregate_from_dir(dir: &Path, variants: &[Variant]) -> Result<ResultTable> {
    let mut trials: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(i) = name.strip_prefix("trial_").and_then(|s| s.parse().ok()) {
            trials.push((i, entry.path()));
        }
    }
    trials.sort();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (_, path) in trials {
        for v in variants {
            let report = path.join(v.name()).join("report.json");
            let error = path.join(v.name()).join("error.json");
            if report.exists() {
                rows.push(serde_json::from_str(&fs::read_to_string(report)?)?);
            } else if error.exists() {
                failures.push(serde_json::from_str(&fs::read_to_string(error)?)?);
            }
        }
    }
    Ok(aggregate(rows, failures, variants))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::random_parameters;

    fn row(variant: Variant, states: Vec<usize>, test: f64) -> TrialResult {
        TrialResult {
            trial: 0,
            variant,
            sorted_states: states,
            iterations: 10,
            final_structure_iteration: 3,
            converged: true,
            fic_score: 0.0,
            train_bound: 0.0,
            train_loglik: test,
            test_loglik: test,
            method: EvalMethod::Exact,
            truth_train_loglik: 0.0,
            truth_test_loglik: 0.0,
        }
    }

    #[test]
    fn aggregation_means_and_sds() {
        let rows = vec![
            row(Variant::Rfab, vec![1, 2, 3], -10.0),
            row(Variant::Rfab, vec![2, 2, 5], -20.0),
            row(Variant::Vb, vec![3, 3, 3], -30.0),
        ];
        let t = aggregate(rows, vec![], &[Variant::Rfab, Variant::Vb]);
        let r = t.summary(Variant::Rfab).unwrap();
        assert_eq!(r.states_mean, vec![1.5, 2.0, 4.0]);
        assert_eq!(r.total_mean, 7.5);
        assert_eq!(r.test_mean, -15.0);
        assert!((r.test_sd - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.summary(Variant::Vb).unwrap().states_sd, vec![0.0; 3]);
    }

    #[test]
    fn exact_evaluation_dominates_bound() {
        let p = random_parameters(&ModelStructure::new(vec![2, 3], 2).unwrap(), 5);
        let (data, _) = sample(&SimulationConfig::new(p.clone(), vec![30], 6)).unwrap();
        let est = CollapsedEstimates::from_params(&p);
        let exact = eval_heldout(&p, &est, &data, 4096).unwrap();
        assert_eq!(exact.method, EvalMethod::Exact);
        let bound = eval_heldout(&p, &est, &data, 5).unwrap();
        assert_eq!(bound.method, EvalMethod::Bound);
        assert!(exact.loglik - bound.loglik >= -1e-8, "{exact:?} {bound:?}");
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().check().is_ok());
        let bad = ExperimentConfig {
            trials: 0,
            ..ExperimentConfig::default()
        };
        assert!(bad.check().is_err());
    }
}
