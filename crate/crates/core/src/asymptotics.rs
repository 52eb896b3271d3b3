//! First-order approximations to expectations of log, y·log y and log Γ of
//! sums of independent Bernoulli variables, with a seeded Monte-Carlo oracle.

use std::collections::BTreeMap;

use log::warn;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{FhmmError, Result};
use crate::model::ln_2pi;
use crate::simulate::stream_rng;

/// y = Σ_i z_i with z_i ~ Bernoulli(p_i) independent; ŷ is the expansion point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BernoulliSumSpec {
    pub p: Vec<f64>,
    /// ȳ = Σ p_i.
    pub y_bar: f64,
    pub y_hat: f64,
}

impl BernoulliSumSpec {
    pub fn new(p: Vec<f64>, y_hat: f64) -> Result<Self> {
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FhmmError::Parameter(format!("Bernoulli mean {bad} outside [0, 1]")));
        }
        if !(y_hat > 0.0) {
            return Err(FhmmError::Parameter("expansion point must be positive".into()));
        }
        let y_bar = p.iter().sum();
        Ok(Self { p, y_bar, y_hat })
    }

    /// Expansion at the mean, ŷ = ȳ.
    pub fn at_mean(p: Vec<f64>) -> Result<Self> {
        let y_bar: f64 = p.iter().sum();
        Self::new(p, y_bar)
    }

    /// n identical Bernoulli(prob) summands, i.e. y ~ Binomial(n, prob).
    pub fn binomial(n: usize, prob: f64, y_hat: f64) -> Result<Self> {
        Self::new(vec![prob; n], y_hat)
    }
}

/// E[log(y + 1)] ≈ log(ŷ + 1) + (ȳ − ŷ)/(ŷ + 1).
pub fn approx_e_log_y_plus1(spec: &BernoulliSumSpec) -> f64 {
    (spec.y_hat + 1.0).ln() + (spec.y_bar - spec.y_hat) / (spec.y_hat + 1.0)
}

/// E[y log y] ≈ ȳ log ŷ + (ȳ − ŷ).
pub fn approx_e_ylogy(spec: &BernoulliSumSpec) -> f64 {
    spec.y_bar * spec.y_hat.ln() + (spec.y_bar - spec.y_hat)
}

/// Stirling-based E[log Γ(y)] ≈ ȳ(log ŷ − 1/(2ŷ)) − (ŷ + ½ log ŷ) + ½(log 2π + 1).
pub fn approx_e_loggamma(spec: &BernoulliSumSpec) -> f64 {
    let yh = spec.y_hat;
    if yh < 10.0 {
        warn!("log-Gamma expansion at ŷ = {yh} is outside its large-count regime");
    }
    spec.y_bar * (yh.ln() - 0.5 / yh) - (yh + 0.5 * yh.ln()) + 0.5 * (ln_2pi() + 1.0)
}

/// E[Σ_n log Γ(y_n) − log Γ(Σ_n y_n)] ≈
/// Σ_n ȳ_n [log(ŷ_n/Σŷ) + 1/(2Σŷ) − 1/(2ŷ_n)] + ½ log Σŷ − ½ Σ_n log ŷ_n + ½(N − 1)(log 2π + 1).
pub fn approx_e_loggamma_diff(specs: &[BernoulliSumSpec]) -> f64 {
    let total: f64 = specs.iter().map(|s| s.y_hat).sum();
    let mut v: f64 = specs
        .iter()
        .map(|s| s.y_bar * ((s.y_hat / total).ln() + 0.5 / total - 0.5 / s.y_hat))
        .sum();
    v += 0.5 * total.ln() - 0.5 * specs.iter().map(|s| s.y_hat.ln()).sum::<f64>();
    v += 0.5 * (specs.len() as f64 - 1.0) * (ln_2pi() + 1.0);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Functional {
    /// log(y + 1)
    LogYPlus1,
    /// y log y, with 0 log 0 = 0
    YLogY,
    /// log Γ(y); draws with y = 0 are discarded
    LogGamma,
    /// Σ_n log Γ(y_n) − log Γ(Σ_n y_n); draws with any y_n = 0 are discarded
    LogGammaDiff,
    /// 1/(y + 1)
    InverseYPlus1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Fraction of draws discarded because log Γ(0) is undefined.
    pub discard_rate: f64,
}

const CHUNK: usize = 8192;

/// Summands grouped by equal probability so each group is one binomial draw.
fn binomial_groups(spec: &BernoulliSumSpec) -> Vec<Binomial> {
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for &p in &spec.p {
        *counts.entry(p.to_bits()).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(bits, n)| Binomial::new(n, f64::from_bits(bits)).expect("probability validated"))
        .collect()
}

fn evaluate(functional: Functional, ys: &[u64]) -> Option<f64> {
    let y = ys[0] as f64;
    match functional {
        Functional::LogYPlus1 => Some((y + 1.0).ln()),
        Functional::YLogY => Some(if y > 0.0 { y * y.ln() } else { 0.0 }),
        Functional::InverseYPlus1 => Some(1.0 / (y + 1.0)),
        Functional::LogGamma => (y > 0.0).then(|| ln_gamma(y)),
        Functional::LogGammaDiff => {
            if ys.contains(&0) {
                return None;
            }
            let total: u64 = ys.iter().sum();
            Some(ys.iter().map(|&v| ln_gamma(v as f64)).sum::<f64>() - ln_gamma(total as f64))
        }
    }
}

/// Seeded Monte-Carlo mean and standard error of a functional of the sums.
/// Single-sum functionals use `specs[0]`. Work is split into fixed chunks,
/// each with its own RNG stream, and reduced in chunk order.
pub fn mc_oracle(specs: &[BernoulliSumSpec], functional: Functional, samples: usize, seed: u64) -> Result<McEstimate> {
    if specs.is_empty() {
        return Err(FhmmError::Parameter("at least one Bernoulli sum is required".into()));
    }
    if samples < 1000 {
        return Err(FhmmError::Parameter("Monte-Carlo oracle needs at least 1000 samples".into()));
    }
    let used = if functional == Functional::LogGammaDiff { specs.len() } else { 1 };
    let groups: Vec<Vec<Binomial>> = specs[..used].iter().map(binomial_groups).collect();
    let chunks = samples.div_ceil(CHUNK);
    // (count, mean, sum of squared deviations) per chunk, merged pairwise in order.
    let partial: Vec<(f64, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut ys = vec![0u64; used];
            let (mut count, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                for (y, g) in ys.iter_mut().zip(&groups) {
                    *y = g.iter().map(|b| b.sample(&mut rng)).sum();
                }
                if let Some(v) = evaluate(functional, &ys) {
                    count += 1.0;
                    let d = v - mean;
                    mean += d / count;
                    m2 += d * (v - mean);
                }
            }
            (count, mean, m2)
        })
        .collect();
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for (nb, mb, qb) in partial {
        if nb == 0.0 {
            continue;
        }
        let total = n + nb;
        let d = mb - mean;
        mean += d * nb / total;
        m2 += qb + d * d * n * nb / total;
        n = total;
    }
    if n < 2.0 {
        return Err(FhmmError::Parameter("every Monte-Carlo draw was discarded".into()));
    }
    let var = m2 / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        discard_rate: 1.0 - n / samples as f64,
    })
}

/// One line of the approximation-versus-simulation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticRow {
    pub quantity: &'static str,
    pub approximation: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    /// Reference value the bound is stated against (e.g. log(ȳ + 1)).
    pub reference: f64,
    /// Upper bound on |E − reference| (or on E itself for the negative moment).
    pub bound: f64,
    pub discard_rate: f64,
}

/// Compares each approximation with simulation for y ~ Binomial(n, p),
/// expanded at ŷ = ȳ = np.
pub fn verify_regime(n: usize, p: f64, samples: usize, seed: u64) -> Result<Vec<AsymptoticRow>> {
    let spec = BernoulliSumSpec::binomial(n, p, n as f64 * p)?;
    let y_bar = spec.y_bar;
    let specs = std::slice::from_ref(&spec);
    let row = |quantity, approximation, f, reference, bound| -> Result<AsymptoticRow> {
        let mc = mc_oracle(specs, f, samples, seed)?;
        Ok(AsymptoticRow {
            quantity,
            approximation,
            monte_carlo: mc.mean,
            std_error: mc.std_error,
            reference,
            bound,
            discard_rate: mc.discard_rate,
        })
    };
    let triple = vec![spec.clone(), spec.clone(), spec.clone()];
    let diff = mc_oracle(&triple, Functional::LogGammaDiff, samples, seed)?;
    Ok(vec![
        row(
            "E[log(y+1)]",
            approx_e_log_y_plus1(&spec),
            Functional::LogYPlus1,
            (y_bar + 1.0).ln(),
            1.0 / y_bar,
        )?,
        row(
            "E[y log y]",
            approx_e_ylogy(&spec),
            Functional::YLogY,
            y_bar * y_bar.ln(),
            1.0,
        )?,
        row("E[1/(y+1)]", 1.0 / y_bar, Functional::InverseYPlus1, 0.0, 1.0 / y_bar)?,
        row(
            "E[log Gamma(y)]",
            approx_e_loggamma(&spec),
            Functional::LogGamma,
            ln_gamma(y_bar),
            f64::NAN,
        )?,
        AsymptoticRow {
            quantity: "E[sum log Gamma(y_n) - log Gamma(sum y_n)], 3 copies",
            approximation: approx_e_loggamma_diff(&triple),
            monte_carlo: diff.mean,
            std_error: diff.std_error,
            reference: f64::NAN,
            bound: f64::NAN,
            discard_rate: diff.discard_rate,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spec_validation() {
        assert!(BernoulliSumSpec::new(vec![0.5, 1.2], 1.0).is_err());
        assert!(BernoulliSumSpec::new(vec![0.5], 0.0).is_err());
        let s = BernoulliSumSpec::new(vec![0.1, 0.2, 0.3], 0.5).unwrap();
        assert_abs_diff_eq!(s.y_bar, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn expansion_at_mean_identities() {
        let s = BernoulliSumSpec::at_mean(vec![0.3; 40]).unwrap();
        assert_abs_diff_eq!(approx_e_log_y_plus1(&s), (s.y_bar + 1.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(approx_e_ylogy(&s), s.y_bar * s.y_bar.ln(), epsilon = 1e-12);
        let y = s.y_bar;
        let stirling = (y - 0.5) * y.ln() - y + 0.5 * ln_2pi();
        assert_abs_diff_eq!(approx_e_loggamma(&s), stirling, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_sums() {
        let s = BernoulliSumSpec::at_mean(vec![1.0; 7]).unwrap();
        assert_abs_diff_eq!(approx_e_log_y_plus1(&s), 8f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(approx_e_ylogy(&s), 7.0 * 7f64.ln(), epsilon = 1e-12);
        let hundred = BernoulliSumSpec::at_mean(vec![1.0; 100]).unwrap();
        assert!((approx_e_loggamma(&hundred) - ln_gamma(100.0)).abs() < 0.01);
        for f in [Functional::LogYPlus1, Functional::YLogY, Functional::LogGamma] {
            let mc = mc_oracle(std::slice::from_ref(&s), f, 2000, 1).unwrap();
            assert_eq!(mc.std_error, 0.0);
            assert_eq!(mc.discard_rate, 0.0);
        }
        let mc = mc_oracle(&[s], Functional::LogGamma, 2000, 1).unwrap();
        assert_abs_diff_eq!(mc.mean, ln_gamma(7.0), epsilon = 1e-12);
    }

    #[test]
    fn loggamma_diff_single_term_vanishes() {
        let s = BernoulliSumSpec::new(vec![0.4; 60], 23.0).unwrap();
        assert_abs_diff_eq!(approx_e_loggamma_diff(&[s]), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loggamma_diff_is_symmetric() {
        let a = BernoulliSumSpec::new(vec![0.2; 100], 21.0).unwrap();
        let b = BernoulliSumSpec::new(vec![0.7; 50], 34.0).unwrap();
        assert_abs_diff_eq!(
            approx_e_loggamma_diff(&[a.clone(), b.clone()]),
            approx_e_loggamma_diff(&[b, a]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn oracle_is_seeded_and_scales_like_clt() {
        let s = BernoulliSumSpec::binomial(200, 0.3, 60.0).unwrap();
        let sl = std::slice::from_ref(&s);
        let a = mc_oracle(sl, Functional::LogYPlus1, 20_000, 9).unwrap();
        assert_eq!(a, mc_oracle(sl, Functional::LogYPlus1, 20_000, 9).unwrap());
        let b = mc_oracle(sl, Functional::LogYPlus1, 40_000, 9).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
        assert!(mc_oracle(sl, Functional::LogYPlus1, 999, 9).is_err());
    }
}
