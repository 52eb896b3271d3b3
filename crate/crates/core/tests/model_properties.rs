use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fabfhmm::flat::{decode_joint, exact_log_likelihood, product_expand};
use fabfhmm::simulate::{paper_ground_truth, random_parameters, sample, SimulationConfig};
use fabfhmm::{LatentAssignment, ModelStructure};

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn structure_strategy() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (prop::collection::vec(1usize..=3, 1..=2), 1usize..=2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_matches_path_sum((states, dim) in structure_strategy(), t_len in 1usize..=3, seed in 0u64..1000) {
        let params = random_parameters(&ModelStructure::new(states.clone(), dim).unwrap(), seed);
        let (data, _) = sample(&SimulationConfig::new(params.clone(), vec![t_len], seed + 1)).unwrap();
        let joint: usize = states.iter().product();
        let mut terms = Vec::new();
        for idx in 0..joint.pow(t_len as u32) {
            let per_t = decode_joint(idx, &vec![joint; t_len]);
            let path = Array2::from_shape_fn((t_len, states.len()), |(t, m)| decode_joint(per_t[t], &states)[m]);
            terms.push(params.complete_log_likelihood(&data, &LatentAssignment { paths: vec![path] }).unwrap());
        }
        let brute = log_sum_exp(&terms);
        let exact = exact_log_likelihood(&params, data.sequence(0), 64).unwrap();
        prop_assert!(((exact - brute) / brute).abs() < 1e-9);
    }

    #[test]
    fn mean_is_linear_in_each_indicator(seed in 0u64..1000, w in 0.0f64..=1.0) {
        let params = random_parameters(&ModelStructure::new(vec![3, 2], 2).unwrap(), seed);
        let a = Array1::from(vec![1.0, 0.0, 0.0]);
        let b = Array1::from(vec![0.0, 0.3, 0.7]);
        let other = Array1::from(vec![0.4, 0.6]);
        let mix = &a * w + &b * (1.0 - w);
        let m_mix = params.mean_vector_soft(&[mix.view(), other.view()]).unwrap();
        let m_a = params.mean_vector_soft(&[a.view(), other.view()]).unwrap();
        let m_b = params.mean_vector_soft(&[b.view(), other.view()]).unwrap();
        let expect = &m_a * w + &m_b * (1.0 - w);
        for (x, y) in m_mix.iter().zip(expect.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn product_expansion_is_stochastic((states, dim) in structure_strategy(), seed in 0u64..1000) {
        let params = random_parameters(&ModelStructure::new(states, dim).unwrap(), seed);
        let flat = product_expand(&params, 64).unwrap();
        prop_assert!((flat.initial.sum() - 1.0).abs() < 1e-12);
        for row in flat.transition.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn emission_density_integrates_to_one() {
    let mut params = random_parameters(&ModelStructure::new(vec![2], 2).unwrap(), 3);
    params.covariance = Array1::from(vec![0.5, 1.5]);
    let mean = params.mean_vector(&[1]).unwrap();
    // Importance sampling from a wider Gaussian centred on the mean.
    let scale = 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let mut log_q = 0.0;
        let mut x = Array1::zeros(2);
        for d in 0..2 {
            let s = scale * params.covariance[d].sqrt();
            x[d] = mean[d] + s * z[d];
            log_q += -0.5 * z[d] * z[d] - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        total += (params.log_emission(x.view(), &[1]).unwrap() - log_q).exp();
    }
    let integral = total / n as f64;
    assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
}

#[test]
fn transition_frequencies_match_parameters() {
    let params = random_parameters(&ModelStructure::new(vec![2], 1).unwrap(), 8);
    let (_, latent) = sample(&SimulationConfig::new(params.clone(), vec![100_000], 9)).unwrap();
    let path = latent.paths[0].column(0).to_vec();
    let mut counts = Array2::<f64>::zeros((2, 2));
    for w in path.windows(2) {
        counts[[w[0], w[1]]] += 1.0;
    }
    for j in 0..2 {
        let row = counts.row(j);
        for k in 0..2 {
            let freq = row[k] / row.sum();
            assert!((freq - params.layers[0].transition[[j, k]]).abs() < 0.01);
        }
    }
}

#[test]
fn layers_are_sampled_independently() {
    let params = random_parameters(&ModelStructure::new(vec![2, 3], 1).unwrap(), 10);
    let (_, latent) = sample(&SimulationConfig::new(params, vec![100_000], 11)).unwrap();
    let path = &latent.paths[0];
    let mut joint = Array2::<f64>::zeros((2, 3));
    for row in path.rows() {
        joint[[row[0], row[1]]] += 1.0;
    }
    let n = joint.sum();
    let a = joint.sum_axis(ndarray::Axis(1));
    let b = joint.sum_axis(ndarray::Axis(0));
    // Successive states are correlated, so thin the χ² statistic by the
    // effective sample size implied by each chain's mixing; a plain χ² on
    // 2 degrees of freedom at α = 0.01 is 9.21.
    let mut chi2 = 0.0;
    for j in 0..2 {
        for k in 0..3 {
            let e = a[j] * b[k] / n;
            chi2 += (joint[[j, k]] - e).powi(2) / e;
        }
    }
    let mix = |col: usize| {
        let s: Vec<f64> = path.column(col).iter().map(|&v| v as f64).collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let cov = s.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>();
        cov / var
    };
    let (r1, r2) = (mix(0), mix(1));
    let inflation = (1.0 + r1 * r2) / (1.0 - r1 * r2);
    assert!(chi2 / inflation < 9.21, "chi2 {chi2}, inflation {inflation}");
}

#[test]
fn long_run_mean_matches_stationary_mean() {
    let params = paper_ground_truth(12);
    let (data, _) = sample(&SimulationConfig::new(params.clone(), vec![200_000], 13)).unwrap();
    let mut expected = params.bias.clone();
    for layer in &params.layers {
        // Stationary distribution by power iteration.
        let mut pi = Array1::from_elem(layer.states(), 1.0 / layer.states() as f64);
        for _ in 0..2000 {
            pi = pi.dot(&layer.transition);
        }
        expected = expected + layer.weights.dot(&pi);
    }
    let x = data.sequence(0);
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    for d in 0..3 {
        // Standard error inflated for autocorrelation; the hidden chains mix
        // within tens of steps, so 10x the i.i.d. error is conservative.
        let sd = x.column(d).std(1.0);
        let se = 10.0 * sd / (x.nrows() as f64).sqrt();
        assert!((mean[d] - expected[d]).abs() < 3.0 * se, "dim {d}: {} vs {}", mean[d], expected[d]);
    }
}
