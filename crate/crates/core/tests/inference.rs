use ndarray::{Array1, Array2};
use proptest::prelude::*;

use fabfhmm::baselines::{vb_fit, VbConfig};
use fabfhmm::fab::{fit, score, FabSession, FitConfig, Variant};
use fabfhmm::harness::{aggregate_from_dir, eval_heldout, run_experiment, EvalMethod, ExperimentConfig};
use fabfhmm::io::{load_model, read_split, write_split};
use fabfhmm::simulate::{random_parameters, sample, SimulationConfig};
use fabfhmm::variational::{estep_sweep, init_state, CollapsedEstimates};
use fabfhmm::{FhmmParameters, ModelStructure, SequenceDataset};

fn dataset(states: Vec<usize>, dim: usize, len: usize, seed: u64) -> (FhmmParameters, SequenceDataset) {
    let truth = random_parameters(&ModelStructure::new(states, dim).unwrap(), seed);
    let (data, _) = sample(&SimulationConfig::new(truth.clone(), vec![len], seed + 1)).unwrap();
    (truth, data)
}

/// State 0 of layer 0 split into states 0 and K with inward ratio ρ : 1.
fn duplicate_first_state(truth: &FhmmParameters, rho: f64) -> FhmmParameters {
    let mut p = truth.clone();
    let layer = &mut p.layers[0];
    let k = layer.states();
    let moved = rho / (1.0 + rho);
    let mut initial = Array1::zeros(k + 1);
    initial.slice_mut(ndarray::s![..k]).assign(&layer.initial);
    initial[k] = layer.initial[0] * moved;
    initial[0] *= 1.0 - moved;
    let mut transition = Array2::zeros((k + 1, k + 1));
    for j in 0..=k {
        let src = if j == k { 0 } else { j };
        for l in 0..k {
            transition[[j, l]] = layer.transition[[src, l]];
        }
        transition[[j, k]] = layer.transition[[src, 0]] * moved;
        transition[[j, 0]] *= 1.0 - moved;
    }
    let mut weights = Array2::zeros((layer.weights.nrows(), k + 1));
    weights.slice_mut(ndarray::s![.., ..k]).assign(&layer.weights);
    weights.column_mut(k).assign(&layer.weights.column(0));
    layer.initial = initial;
    layer.transition = transition;
    layer.weights = weights;
    p
}

#[test]
fn proportional_states_keep_proportional_marginals() {
    let (truth, data) = dataset(vec![2, 2], 4, 200, 1);
    let start = duplicate_first_state(&truth, 0.4);
    let estimates = CollapsedEstimates::from_params(&start);
    let mut state = init_state(&start.structure(), &data);
    state.refresh(&estimates).unwrap();
    let log_delta: Vec<Array1<f64>> = start.layers.iter().map(|l| Array1::zeros(l.states())).collect();
    let next = estep_sweep(&start, &log_delta, &estimates, &data, &state).unwrap();
    let q = next.unary(0, 0).unwrap();
    for t in 0..q.nrows() {
        assert!((q[[t, 2]] - 0.4 * q[[t, 0]]).abs() < 1e-12 * q[[t, 0]].max(1e-300));
    }
}

#[test]
fn shrinkage_drives_duplicates_apart_but_uniform_delta_does_not() {
    let (truth, data) = dataset(vec![2], 10, 500, 3);
    let start = duplicate_first_state(&truth, 0.5);
    let run = |variant| {
        let config = FitConfig::with_variant(variant);
        let mut s = FabSession::new(&data, start.clone(), CollapsedEstimates::from_params(&start), config).unwrap();
        let mut rho = Vec::new();
        for _ in 0..5 {
            s.step().unwrap();
            let mass = &s.state.sufficient_stats().unwrap()[0].mass;
            rho.push(mass[2] / mass[0]);
        }
        rho
    };
    let rfab = run(Variant::Rfab);
    let vb = run(Variant::Vb);
    assert!(rfab.windows(2).all(|w| w[1] < w[0]), "{rfab:?}");
    assert!(rfab[0] < 0.5);
    // Without δ only the pseudocounts act, pulling the ratio toward 1.
    assert!(vb.windows(2).all(|w| w[1] >= w[0]), "{vb:?}");
}

#[test]
fn fits_never_grow_and_report_consistent_structure() {
    let (_, data) = dataset(vec![2, 3], 3, 400, 5);
    let structure = ModelStructure::new(vec![5, 5], 3).unwrap();
    for variant in Variant::ALL {
        let config = FitConfig {
            max_iters: 120,
            ..FitConfig::with_variant(variant)
        };
        let r = fit(&data, &structure, &config).unwrap();
        let totals: Vec<usize> = r.trace.iter().map(|t| t.states.iter().sum()).collect();
        assert!(totals.windows(2).all(|w| w[1] <= w[0]), "{variant}: {totals:?}");
        assert_eq!(r.trace.last().unwrap().states, r.states());
        r.params.check().unwrap();
        let last_prune = r.trace.iter().rev().find(|t| !t.pruned.is_empty()).map_or(0, |t| t.iteration);
        assert_eq!(last_prune, r.final_structure_iteration);
        for rec in &r.trace {
            let t = rec.terms;
            let parts = t.expected_loglik + t.shrinkage_term + t.markov_term + t.entropy + t.penalty;
            assert!((parts - t.total).abs() <= 1e-9 * t.total.abs());
        }
    }
}

#[test]
fn vb_baseline_has_no_shrinkage_terms() {
    let (_, data) = dataset(vec![2], 2, 200, 7);
    let structure = ModelStructure::new(vec![4], 2).unwrap();
    let r = vb_fit(
        &data,
        &structure,
        &VbConfig {
            max_iters: 30,
            ..VbConfig::default()
        },
    )
    .unwrap();
    assert_eq!(r.variant, Variant::Vb);
    for rec in &r.trace {
        assert_eq!(rec.terms.shrinkage_term, 0.0);
        assert_eq!(rec.terms.penalty, 0.0);
    }
}

#[test]
fn score_of_truth_beats_score_of_perturbed_model() {
    let (truth, data) = dataset(vec![2, 2], 3, 600, 9);
    let config = FitConfig {
        max_iters: 100,
        ..FitConfig::default()
    };
    let good = score(&data, &truth, &config).unwrap();
    let mut bad = truth.clone();
    bad.layers[0].weights.mapv_inplace(|w| -w);
    let worse = score(&data, &bad, &config).unwrap();
    assert!(good.total > worse.total, "{} vs {}", good.total, worse.total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_heldout_dominates_bound(seed in 0u64..500, k1 in 1usize..=3, k2 in 1usize..=3) {
        let (truth, data) = dataset(vec![k1, k2], 2, 25, seed);
        let est = CollapsedEstimates::from_params(&truth);
        let exact = eval_heldout(&truth, &est, &data, 64).unwrap();
        let bound = eval_heldout(&truth, &est, &data, 0).unwrap();
        prop_assert_eq!(exact.method, EvalMethod::Exact);
        prop_assert_eq!(bound.method, EvalMethod::Bound);
        prop_assert!(exact.loglik - bound.loglik >= -1e-8);
    }
}

#[test]
fn single_layer_heldout_is_hmm_forward() {
    let (truth, data) = dataset(vec![3], 2, 50, 11);
    let est = CollapsedEstimates::from_params(&truth);
    let held = eval_heldout(&truth, &est, &data, 4096).unwrap();
    // Direct scaled forward recursion.
    let layer = &truth.layers[0];
    let x = data.sequence(0);
    let mut alpha: Array1<f64> = (0..3)
        .map(|k| layer.initial[k] * truth.log_emission(x.row(0), &[k]).unwrap().exp())
        .collect();
    let mut ll = alpha.sum().ln();
    alpha /= alpha.sum();
    for t in 1..x.nrows() {
        let pred = alpha.dot(&layer.transition);
        alpha = (0..3)
            .map(|k| pred[k] * truth.log_emission(x.row(t), &[k]).unwrap().exp())
            .collect();
        ll += alpha.sum().ln();
        alpha /= alpha.sum();
    }
    assert_eq!(held.method, EvalMethod::Exact);
    assert!((held.loglik - ll).abs() < 1e-9 * ll.abs());
}

#[test]
fn experiment_smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        trials: 1,
        train_len: 200,
        test_len: 200,
        fit: FitConfig {
            max_iters: 40,
            ..FitConfig::default()
        },
        out_dir: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let table = run_experiment(&config).unwrap();
    for f in ["table1.csv", "table2.csv", "fig2_states.csv", "fig3_trainll.csv", "trial_0/truth.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    for v in Variant::ALL {
        for f in ["model.json", "trace.csv", "report.json"] {
            assert!(dir.path().join("trial_0").join(v.name()).join(f).exists());
        }
        let s = table.summary(v).unwrap();
        assert_eq!(s.completed, 1);
        assert!(s.states_mean.windows(2).all(|w| w[0] <= w[1]));
        load_model(&dir.path().join("trial_0").join(v.name()).join("model.json")).unwrap();
    }
    let header = std::fs::read_to_string(dir.path().join("trial_0/rfab/trace.csv")).unwrap();
    assert!(header.starts_with("iter,G,expected_loglik,shrinkage,markov,entropy,penalty,K_1,K_2,K_3,pruned_this_iter\n"));
    let reread = aggregate_from_dir(dir.path(), &Variant::ALL).unwrap();
    assert_eq!(reread, table);
}

#[test]
fn dataset_files_feed_back_into_fit() {
    let (_, data) = dataset(vec![2], 2, 100, 13);
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train", &data).unwrap();
    let back = read_split(dir.path(), "train").unwrap();
    let config = FitConfig {
        max_iters: 10,
        ..FitConfig::default()
    };
    let structure = ModelStructure::new(vec![3], 2).unwrap();
    let a = fit(&data, &structure, &config).unwrap();
    let b = fit(&back, &structure, &config).unwrap();
    assert_eq!(a.trace, b.trace);
}
