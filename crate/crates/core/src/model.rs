//! FHMM parameterization: independent Markov chains whose states add up to
//! the mean of a diagonal-covariance Gaussian emission.

use std::f64::consts::PI;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{FhmmError, Result};

/// Tolerance on the sum of a probability vector or transition row.
pub const STOCHASTIC_TOL: f64 = 1e-12;

pub(crate) fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// Layer count, states per layer and observation dimensionality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelStructure {
    states: Vec<usize>,
    dim: usize,
}

impl ModelStructure {
    pub fn new(states: Vec<usize>, dim: usize) -> Result<Self> {
        if states.is_empty() {
            return Err(FhmmError::Shape("a model needs at least one layer".into()));
        }
        if let Some(m) = states.iter().position(|&k| k == 0) {
            return Err(FhmmError::Shape(format!("layer {m} has zero states")));
        }
        if dim == 0 {
            return Err(FhmmError::Shape("observation dimension must be positive".into()));
        }
        Ok(Self { states, dim })
    }

    /// Number of layers (M).
    pub fn layers(&self) -> usize {
        self.states.len()
    }

    /// States per layer (K_1..K_M).
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// K_0 = Σ_m K_m.
    pub fn total_states(&self) -> usize {
        self.states.iter().sum()
    }

    /// ∏_m K_m, saturating on overflow.
    pub fn joint_states(&self) -> usize {
        self.states
            .iter()
            .fold(1usize, |acc, &k| acc.saturating_mul(k))
    }
}

/// One Markov chain of the factorial model.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Initial distribution α, length K.
    pub initial: Array1<f64>,
    /// Row-stochastic K×K transition matrix β.
    pub transition: Array2<f64>,
    /// D×K emission weights; column k is the mean contribution of state k.
    pub weights: Array2<f64>,
}

impl Layer {
    pub fn states(&self) -> usize {
        self.initial.len()
    }

    /// Uniform chain with zero weights.
    pub fn uniform(states: usize, dim: usize) -> Self {
        let k = states as f64;
        Self {
            initial: Array1::from_elem(states, 1.0 / k),
            transition: Array2::from_elem((states, states), 1.0 / k),
            weights: Array2::zeros((dim, states)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhmmParameters {
    pub layers: Vec<Layer>,
    /// Diagonal of the emission covariance.
    pub covariance: Array1<f64>,
    /// Global mean offset; stays zero until a layer has been collapsed into it.
    pub bias: Array1<f64>,
}

/// A broken invariant found by [`FhmmParameters::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    InitialSum { layer: usize, sum: f64 },
    TransitionRowSum { layer: usize, row: usize, sum: f64 },
    NegativeProbability { layer: usize, what: &'static str },
    NonPositiveCovariance { dim: usize, value: f64 },
    NonFinite(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape: {s}"),
            Violation::InitialSum { layer, sum } => {
                write!(f, "layer {layer}: initial distribution sums to {sum}")
            }
            Violation::TransitionRowSum { layer, row, sum } => {
                write!(f, "layer {layer}: transition row {row} sums to {sum}")
            }
            Violation::NegativeProbability { layer, what } => {
                write!(f, "layer {layer}: negative entry in {what}")
            }
            Violation::NonPositiveCovariance { dim, value } => {
                write!(f, "covariance entry {dim} is {value}, must be > 0")
            }
            Violation::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

impl FhmmParameters {
    /// Uniform chains, zero weights, unit covariance.
    pub fn uniform(structure: &ModelStructure) -> Self {
        Self {
            layers: structure
                .states()
                .iter()
                .map(|&k| Layer::uniform(k, structure.dim()))
                .collect(),
            covariance: Array1::ones(structure.dim()),
            bias: Array1::zeros(structure.dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.covariance.len()
    }

    pub fn structure(&self) -> ModelStructure {
        ModelStructure {
            states: self.layers.iter().map(Layer::states).collect(),
            dim: self.dim(),
        }
    }

    /// Every violated invariant; empty when the parameters are valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let d = self.dim();
        if self.layers.is_empty() {
            out.push(Violation::Shape("no layers".into()));
        }
        if d == 0 {
            out.push(Violation::Shape("zero observation dimension".into()));
        }
        if self.bias.len() != d {
            out.push(Violation::Shape(format!(
                "bias has length {}, expected {d}",
                self.bias.len()
            )));
        }
        for (m, layer) in self.layers.iter().enumerate() {
            let k = layer.initial.len();
            if k == 0 {
                out.push(Violation::Shape(format!("layer {m} has no states")));
                continue;
            }
            if layer.transition.dim() != (k, k) {
                out.push(Violation::Shape(format!(
                    "layer {m}: transition is {:?}, expected ({k}, {k})",
                    layer.transition.dim()
                )));
                continue;
            }
            if layer.weights.dim() != (d, k) {
                out.push(Violation::Shape(format!(
                    "layer {m}: weights are {:?}, expected ({d}, {k})",
                    layer.weights.dim()
                )));
            }
            if layer.initial.iter().any(|&a| a < 0.0) {
                out.push(Violation::NegativeProbability { layer: m, what: "initial" });
            }
            if layer.transition.iter().any(|&a| a < 0.0) {
                out.push(Violation::NegativeProbability { layer: m, what: "transition" });
            }
            let sum = layer.initial.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                out.push(Violation::InitialSum { layer: m, sum });
            }
            for (row, r) in layer.transition.rows().into_iter().enumerate() {
                let sum = r.sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    out.push(Violation::TransitionRowSum { layer: m, row, sum });
                }
            }
            if layer.weights.iter().any(|w| !w.is_finite()) {
                out.push(Violation::NonFinite("weights"));
            }
        }
        for (dim, &value) in self.covariance.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                out.push(Violation::NonPositiveCovariance { dim, value });
            }
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            out.push(Violation::NonFinite("bias"));
        }
        out
    }

    /// Turns the first violation into an error.
    pub fn check(&self) -> Result<()> {
        match self.validate().into_iter().next() {
            None => Ok(()),
            Some(v @ Violation::Shape(_)) => Err(FhmmError::Shape(v.to_string())),
            Some(v) => Err(FhmmError::Parameter(v.to_string())),
        }
    }

    fn check_joint(&self, states: &[usize]) -> Result<()> {
        if states.len() != self.layers.len() {
            return Err(FhmmError::Shape(format!(
                "joint state has {} layers, model has {}",
                states.len(),
                self.layers.len()
            )));
        }
        for (m, (&s, layer)) in states.iter().zip(&self.layers).enumerate() {
            if s >= layer.states() {
                return Err(FhmmError::Shape(format!(
                    "layer {m}: state {s} out of range 0..{}",
                    layer.states()
                )));
            }
        }
        Ok(())
    }

    /// μ = bias + Σ_m W^m z^(m) for a joint state given as one index per layer.
    pub fn mean_vector(&self, states: &[usize]) -> Result<Array1<f64>> {
        self.check_joint(states)?;
        let mut mu = self.bias.clone();
        for (&s, layer) in states.iter().zip(&self.layers) {
            mu += &layer.weights.column(s);
        }
        Ok(mu)
    }

    /// Mean for soft (expected) indicators, one probability vector per layer.
    pub fn mean_vector_soft(&self, indicators: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
        if indicators.len() != self.layers.len() {
            return Err(FhmmError::Shape(format!(
                "{} indicator vectors for {} layers",
                indicators.len(),
                self.layers.len()
            )));
        }
        let mut mu = self.bias.clone();
        for (m, (z, layer)) in indicators.iter().zip(&self.layers).enumerate() {
            if z.len() != layer.states() {
                return Err(FhmmError::Shape(format!(
                    "layer {m}: indicator length {} != {}",
                    z.len(),
                    layer.states()
                )));
            }
            mu += &layer.weights.dot(z);
        }
        Ok(mu)
    }

    /// Log density of x under the Gaussian with the given mean.
    pub fn log_density_at_mean(&self, x: ArrayView1<f64>, mean: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() || mean.len() != self.dim() {
            return Err(FhmmError::Shape(format!(
                "observation of length {} for dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut acc = 0.0;
        for ((&xd, &md), &c) in x.iter().zip(mean.iter()).zip(self.covariance.iter()) {
            if !(c > 0.0) {
                return Err(FhmmError::Parameter(format!("covariance entry {c} is not positive")));
            }
            let r = xd - md;
            acc += ln_2pi() + c.ln() + r * r / c;
        }
        Ok(-0.5 * acc)
    }

    /// log N(x; μ(z), diag C).
    pub fn log_emission(&self, x: ArrayView1<f64>, states: &[usize]) -> Result<f64> {
        let mu = self.mean_vector(states)?;
        self.log_density_at_mean(x, mu.view())
    }

    /// log p(x, z | θ) summed over sequences. Taking a zero-probability
    /// transition yields −∞.
    pub fn complete_log_likelihood(
        &self,
        data: &SequenceDataset,
        latent: &LatentAssignment,
    ) -> Result<f64> {
        if latent.paths.len() != data.len() {
            return Err(FhmmError::Shape(format!(
                "{} latent paths for {} sequences",
                latent.paths.len(),
                data.len()
            )));
        }
        let m_layers = self.layers.len();
        let mut total = 0.0;
        for (seq, path) in data.sequences.iter().zip(&latent.paths) {
            if path.dim() != (seq.nrows(), m_layers) {
                return Err(FhmmError::Shape(format!(
                    "latent path is {:?}, expected ({}, {m_layers})",
                    path.dim(),
                    seq.nrows()
                )));
            }
            for t in 0..seq.nrows() {
                let z: Vec<usize> = path.row(t).to_vec();
                for (m, layer) in self.layers.iter().enumerate() {
                    let p = if t == 0 {
                        layer.initial[z[m]]
                    } else {
                        layer.transition[[path[[t - 1, m]], z[m]]]
                    };
                    total += p.ln();
                }
                total += self.log_emission(seq.row(t), &z)?;
            }
        }
        if total == f64::NEG_INFINITY {
            log::debug!("complete-data log-likelihood is -inf (zero-probability path)");
        }
        Ok(total)
    }
}

/// N observation sequences, each a T_n×D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<Array2<f64>>,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return Err(FhmmError::Shape("dataset has no sequences".into()));
        };
        let d = first.ncols();
        if d == 0 {
            return Err(FhmmError::Shape("observations have zero dimension".into()));
        }
        for (n, s) in sequences.iter().enumerate() {
            if s.nrows() == 0 {
                return Err(FhmmError::Shape(format!("sequence {n} is empty")));
            }
            if s.ncols() != d {
                return Err(FhmmError::Shape(format!(
                    "sequence {n} has dimension {}, expected {d}",
                    s.ncols()
                )));
            }
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.ncols())
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.nrows()).collect()
    }

    /// Σ_n T_n.
    pub fn total_len(&self) -> usize {
        self.sequences.iter().map(|s| s.nrows()).sum()
    }

    pub fn sequence(&self, n: usize) -> ArrayView2<'_, f64> {
        self.sequences[n].view()
    }
}

/// Hidden state paths stored as one state index per (t, layer); the index is
/// the position of the single 1 in the one-hot indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentAssignment {
    pub paths: Vec<Array2<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn two_layer() -> FhmmParameters {
        let s = ModelStructure::new(vec![2, 2], 1).unwrap();
        let mut p = FhmmParameters::uniform(&s);
        p.layers[0].weights = array![[1.0, 2.0]];
        p.layers[1].weights = array![[10.0, 20.0]];
        p
    }

    #[test]
    fn structure_rejects_degenerate_shapes() {
        assert!(ModelStructure::new(vec![], 2).is_err());
        assert!(ModelStructure::new(vec![2, 0], 2).is_err());
        assert!(ModelStructure::new(vec![2], 0).is_err());
        let s = ModelStructure::new(vec![2, 2, 3], 3).unwrap();
        assert_eq!(s.total_states(), 7);
        assert_eq!(s.joint_states(), 12);
    }

    #[test]
    fn mean_vector_selects_columns() {
        let s = ModelStructure::new(vec![3], 3).unwrap();
        let mut p = FhmmParameters::uniform(&s);
        p.layers[0].weights = Array2::eye(3);
        assert_eq!(p.mean_vector(&[1]).unwrap(), array![0.0, 1.0, 0.0]);

        let mut z = FhmmParameters::uniform(&s);
        z.bias = array![0.5, -1.0, 2.0];
        assert_eq!(z.mean_vector(&[2]).unwrap(), z.bias);

        // state 2 of layer 1 and state 1 of layer 2 (zero-based 1, 0)
        assert_eq!(two_layer().mean_vector(&[1, 0]).unwrap(), array![12.0]);
        assert!(two_layer().mean_vector(&[2, 0]).is_err());
        assert!(two_layer().mean_vector(&[0]).is_err());
    }

    #[test]
    fn log_emission_reference_values() {
        let s = ModelStructure::new(vec![1], 1).unwrap();
        let p = FhmmParameters::uniform(&s);
        let peak = p.log_emission(array![0.0].view(), &[0]).unwrap();
        assert_abs_diff_eq!(peak, -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);

        let s2 = ModelStructure::new(vec![1], 2).unwrap();
        let mut p2 = FhmmParameters::uniform(&s2);
        p2.covariance = array![0.4, 0.4];
        let at_mean = p2.log_emission(array![0.0, 0.0].view(), &[0]).unwrap();
        assert_abs_diff_eq!(at_mean, -(2.0 * PI * 0.4).ln(), epsilon = 1e-14);
        let sd = 0.4f64.sqrt();
        let shifted = p2.log_emission(array![sd, -sd].view(), &[0]).unwrap();
        assert_abs_diff_eq!(shifted, at_mean - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn log_emission_rejects_nonpositive_covariance() {
        let s = ModelStructure::new(vec![1], 1).unwrap();
        let mut p = FhmmParameters::uniform(&s);
        p.covariance[0] = 0.0;
        assert!(matches!(
            p.log_emission(array![0.0].view(), &[0]),
            Err(FhmmError::Parameter(_))
        ));
    }

    #[test]
    fn complete_likelihood_single_state_chains_is_emission_sum() {
        let s = ModelStructure::new(vec![1, 1], 2).unwrap();
        let mut p = FhmmParameters::uniform(&s);
        p.layers[0].weights = array![[1.0], [0.0]];
        p.layers[1].weights = array![[0.0], [-1.0]];
        let x = array![[0.3, 0.1], [1.2, -0.7], [0.0, 0.0]];
        let data = SequenceDataset::new(vec![x.clone()]).unwrap();
        let z = LatentAssignment { paths: vec![Array2::zeros((3, 2))] };
        let expected: f64 = (0..3)
            .map(|t| p.log_emission(x.row(t), &[0, 0]).unwrap())
            .sum();
        assert_abs_diff_eq!(
            p.complete_log_likelihood(&data, &z).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn complete_likelihood_hand_computed() {
        // T=2, M=1, K=2, D=1, W=[0, 3], C=1.
        let s = ModelStructure::new(vec![2], 1).unwrap();
        let mut p = FhmmParameters::uniform(&s);
        p.layers[0].initial = array![0.3, 0.7];
        p.layers[0].transition = array![[0.9, 0.1], [0.4, 0.6]];
        p.layers[0].weights = array![[0.0, 3.0]];
        let data = SequenceDataset::new(vec![array![[0.5], [2.0]]]).unwrap();
        let z = LatentAssignment { paths: vec![array![[1], [0]]] };
        let ln2pi = (2.0 * PI).ln();
        let expected = 0.7f64.ln()
            + 0.4f64.ln()
            + (-0.5 * (ln2pi + 2.5 * 2.5))
            + (-0.5 * (ln2pi + 4.0));
        assert_abs_diff_eq!(
            p.complete_log_likelihood(&data, &z).unwrap(),
            expected,
            epsilon = 1e-12
        );

        // T=1: only the initial term and one emission.
        let one = SequenceDataset::new(vec![array![[0.5]]]).unwrap();
        let z1 = LatentAssignment { paths: vec![array![[0]]] };
        assert_abs_diff_eq!(
            p.complete_log_likelihood(&one, &z1).unwrap(),
            0.3f64.ln() - 0.5 * (ln2pi + 0.25),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_probability_path_is_negative_infinity() {
        let s = ModelStructure::new(vec![2], 1).unwrap();
        let mut p = FhmmParameters::uniform(&s);
        p.layers[0].transition = array![[1.0, 0.0], [0.0, 1.0]];
        let data = SequenceDataset::new(vec![array![[0.0], [0.0]]]).unwrap();
        let z = LatentAssignment { paths: vec![array![[0], [1]]] };
        assert_eq!(
            p.complete_log_likelihood(&data, &z).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn validate_reports_each_violation() {
        let s = ModelStructure::new(vec![2, 3], 2).unwrap();
        let p = FhmmParameters::uniform(&s);
        assert!(p.validate().is_empty());

        let mut bad_row = p.clone();
        bad_row.layers[1].transition[[2, 0]] -= 0.1;
        let v = bad_row.validate();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::TransitionRowSum { layer: 1, row: 2, .. }));

        let mut bad_c = p.clone();
        bad_c.covariance[1] = 0.0;
        let v = bad_c.validate();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::NonPositiveCovariance { dim: 1, .. }));
    }

    #[test]
    fn dataset_rejects_ragged_dimensions() {
        assert!(SequenceDataset::new(vec![]).is_err());
        assert!(SequenceDataset::new(vec![Array2::zeros((0, 2))]).is_err());
        assert!(SequenceDataset::new(vec![Array2::zeros((3, 2)), Array2::zeros((3, 1))]).is_err());
        let d = SequenceDataset::new(vec![Array2::zeros((3, 2)), Array2::zeros((5, 2))]).unwrap();
        assert_eq!(d.lengths(), vec![3, 5]);
        assert_eq!(d.total_len(), 8);
    }
}
