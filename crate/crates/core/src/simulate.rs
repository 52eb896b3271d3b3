//! Seeded ancestral sampling from an FHMM.
//!
//! Every sequence draws from its own ChaCha stream (`set_stream(n + 1)`), so
//! output is bit-identical regardless of how many threads generate it.

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{FhmmError, Result};
use crate::model::{FhmmParameters, LatentAssignment, Layer, ModelStructure, SequenceDataset};

/// Stream reserved for drawing ground-truth parameters.
const PARAMETER_STREAM: u64 = 0;

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub params: FhmmParameters,
    pub n_sequences: usize,
    pub lengths: Vec<usize>,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(params: FhmmParameters, lengths: Vec<usize>, seed: u64) -> Self {
        Self {
            params,
            n_sequences: lengths.len(),
            lengths,
            seed,
        }
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub(crate) fn dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: f64, k: usize) -> Array1<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration must be positive");
    let mut v: Array1<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s = v.sum();
    if s > 0.0 {
        v /= s;
    } else {
        v.fill(1.0 / k as f64);
    }
    v
}

fn layer_samplers(layer: &Layer) -> Result<(WeightedIndex<f64>, Vec<WeightedIndex<f64>>)> {
    let bad = |e: rand::distr::weighted::Error| FhmmError::Parameter(e.to_string());
    let init = WeightedIndex::new(layer.initial.iter().copied()).map_err(bad)?;
    let rows = layer
        .transition
        .rows()
        .into_iter()
        .map(|r| WeightedIndex::new(r.iter().copied()).map_err(bad))
        .collect::<Result<Vec<_>>>()?;
    Ok((init, rows))
}

/// Draws observation sequences and the hidden paths that generated them.
pub fn sample(config: &SimulationConfig) -> Result<(SequenceDataset, LatentAssignment)> {
    config.params.check()?;
    if config.lengths.len() != config.n_sequences || config.n_sequences == 0 {
        return Err(FhmmError::Parameter(format!(
            "{} lengths given for {} sequences",
            config.lengths.len(),
            config.n_sequences
        )));
    }
    if config.lengths.contains(&0) {
        return Err(FhmmError::Parameter("sequence lengths must be at least 1".into()));
    }
    let params = &config.params;
    let samplers = params
        .layers
        .iter()
        .map(layer_samplers)
        .collect::<Result<Vec<_>>>()?;
    let sd: Vec<f64> = params.covariance.iter().map(|c| c.sqrt()).collect();
    let m_layers = params.layers.len();
    let d = params.dim();

    let drawn: Vec<(Array2<f64>, Array2<usize>)> = config
        .lengths
        .par_iter()
        .enumerate()
        .map(|(n, &len)| {
            let mut rng = stream_rng(config.seed, n as u64 + 1);
            let mut path = Array2::zeros((len, m_layers));
            for (m, (init, rows)) in samplers.iter().enumerate() {
                let mut state = init.sample(&mut rng);
                path[[0, m]] = state;
                for t in 1..len {
                    state = rows[state].sample(&mut rng);
                    path[[t, m]] = state;
                }
            }
            let mut x = Array2::zeros((len, d));
            for t in 0..len {
                let mut mu = params.bias.clone();
                for (m, layer) in params.layers.iter().enumerate() {
                    mu += &layer.weights.column(path[[t, m]]);
                }
                for j in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    x[[t, j]] = mu[j] + sd[j] * e;
                }
            }
            (x, path)
        })
        .collect();

    let (sequences, paths) = drawn.into_iter().unzip();
    Ok((SequenceDataset::new(sequences)?, LatentAssignment { paths }))
}

/// Covariance of the synthetic benchmark (isotropic 0.4).
pub const PAPER_VARIANCE: f64 = 0.4;
/// Layer sizes of the synthetic benchmark's ground truth.
pub const PAPER_STATES: [usize; 3] = [2, 2, 3];

/// Random ground truth with the benchmark's shape: three layers of (2, 2, 3)
/// states in three dimensions. W ~ U[-2, 2], transition rows ~ Dir(5),
/// initial distributions ~ Dir(1).
pub fn paper_ground_truth(seed: u64) -> FhmmParameters {
    let structure = ModelStructure::new(PAPER_STATES.to_vec(), 3).expect("static structure");
    random_parameters(&structure, seed)
}

/// Draws parameters for an arbitrary structure with the same recipe as
/// [`paper_ground_truth`].
pub fn random_parameters(structure: &ModelStructure, seed: u64) -> FhmmParameters {
    let mut rng = stream_rng(seed, PARAMETER_STREAM);
    let d = structure.dim();
    let weight = Uniform::new_inclusive(-2.0, 2.0).expect("valid range");
    let layers = structure
        .states()
        .iter()
        .map(|&k| {
            let initial = dirichlet(&mut rng, 1.0, k);
            let mut transition = Array2::zeros((k, k));
            for mut row in transition.rows_mut() {
                row.assign(&dirichlet(&mut rng, 5.0, k));
            }
            let weights = Array2::from_shape_fn((d, k), |_| weight.sample(&mut rng));
            Layer {
                initial,
                transition,
                weights,
            }
        })
        .collect();
    FhmmParameters {
        layers,
        covariance: Array1::from_elem(d, PAPER_VARIANCE),
        bias: Array1::zeros(d),
    }
}
