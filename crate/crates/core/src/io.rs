//! Model JSON, dataset CSV + manifest, and fit trace CSV.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};
use crate::fab::FitReport;
use crate::model::{FhmmParameters, Layer, SequenceDataset};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    version: u32,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K")]
    k: Vec<usize>,
    #[serde(rename = "D")]
    d: usize,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<Vec<f64>>>,
    /// Per layer, D rows of K_m entries.
    #[serde(rename = "W")]
    w: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    bias: Vec<f64>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>, shape: (usize, usize), what: &str) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(parse_error(format!("{what} must be {}x{}", shape.0, shape.1)));
    }
    Array2::from_shape_vec(shape, rows.into_iter().flatten().collect()).map_err(|e| parse_error(e.to_string()))
}

fn parse_error(message: String) -> FhmmError {
    FhmmError::Parse {
        version: MODEL_FORMAT_VERSION,
        message,
    }
}

pub fn model_to_json(params: &FhmmParameters) -> Result<String> {
    let doc = ModelDocument {
        version: MODEL_FORMAT_VERSION,
        m: params.layers.len(),
        k: params.layers.iter().map(Layer::states).collect(),
        d: params.dim(),
        alpha: params.layers.iter().map(|l| l.initial.to_vec()).collect(),
        beta: params.layers.iter().map(|l| rows(&l.transition)).collect(),
        w: params.layers.iter().map(|l| rows(&l.weights)).collect(),
        c: params.covariance.to_vec(),
        bias: params.bias.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses and validates a model document. Missing or malformed fields are
/// reported by name.
pub fn model_from_json(text: &str) -> Result<FhmmParameters> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| parse_error(e.to_string()))?;
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(parse_error(format!("unsupported model format version {}", doc.version)));
    }
    let (m, d) = (doc.m, doc.d);
    if doc.k.len() != m || doc.alpha.len() != m || doc.beta.len() != m || doc.w.len() != m {
        return Err(parse_error(format!("K, alpha, beta and W must each list {m} layers")));
    }
    if doc.c.len() != d || doc.bias.len() != d {
        return Err(parse_error(format!("C and bias must have length D = {d}")));
    }
    let mut layers = Vec::with_capacity(m);
    for (i, (((k, alpha), beta), w)) in doc.k.iter().zip(doc.alpha).zip(doc.beta).zip(doc.w).enumerate() {
        if alpha.len() != *k {
            return Err(parse_error(format!("alpha[{i}] must have length {k}")));
        }
        layers.push(Layer {
            initial: Array1::from(alpha),
            transition: matrix(beta, (*k, *k), &format!("beta[{i}]"))?,
            weights: matrix(w, (d, *k), &format!("W[{i}]"))?,
        });
    }
    let params = FhmmParameters {
        layers,
        covariance: Array1::from(doc.c),
        bias: Array1::from(doc.bias),
    };
    params.check()?;
    Ok(params)
}

pub fn save_model(path: &Path, params: &FhmmParameters) -> Result<()> {
    fs::write(path, model_to_json(params)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FhmmParameters> {
    model_from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub file: String,
    pub length: usize,
}

/// Lists the CSV files of each named split (e.g. "train", "test").
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub splits: std::collections::BTreeMap<String, Vec<SequenceFile>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_sequence(path: &Path, seq: ndarray::ArrayView2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=seq.ncols()).map(|d| format!("x{d}")));
    w.write_record(&header)?;
    for (t, row) in seq.rows().into_iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `t,x1,...,xD` CSV; rows must be in time order starting at 0.
pub fn read_sequence(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len().saturating_sub(1);
    if dim == 0 {
        return Err(FhmmError::Shape(format!("{} has no observation columns", path.display())));
    }
    let mut values = Vec::new();
    let mut len = 0;
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| FhmmError::Shape(format!("{}: row {len}: {what}", path.display()));
        if rec.len() != dim + 1 {
            return Err(bad("wrong number of columns"));
        }
        if rec[0].trim().parse::<usize>().ok() != Some(len) {
            return Err(bad("time index out of order"));
        }
        for field in rec.iter().skip(1) {
            values.push(field.trim().parse::<f64>().map_err(|_| bad("non-numeric value"))?);
        }
        len += 1;
    }
    Array2::from_shape_vec((len, dim), values).map_err(|e| FhmmError::Shape(e.to_string()))
}

/// Writes `<split>_<n>.csv` per sequence and adds the split to the manifest
/// in `dir`, creating both as needed.
pub fn write_split(dir: &Path, split: &str, data: &SequenceDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = read_manifest(dir).unwrap_or_default();
    manifest.dim = data.dim();
    let mut files = Vec::with_capacity(data.len());
    for n in 0..data.len() {
        let file = format!("{split}_{n}.csv");
        write_sequence(&dir.join(&file), data.sequence(n))?;
        files.push(SequenceFile {
            file,
            length: data.sequence(n).nrows(),
        });
    }
    manifest.splits.insert(split.to_string(), files);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

pub fn read_split(dir: &Path, split: &str) -> Result<SequenceDataset> {
    let manifest = read_manifest(dir)?;
    let files = manifest
        .splits
        .get(split)
        .ok_or_else(|| FhmmError::Parameter(format!("manifest in {} has no split {split:?}", dir.display())))?;
    let mut sequences = Vec::with_capacity(files.len());
    for f in files {
        let path: PathBuf = dir.join(&f.file);
        let seq = read_sequence(&path)?;
        if seq.nrows() != f.length || seq.ncols() != manifest.dim {
            return Err(FhmmError::Shape(format!(
                "{} is {}x{}, manifest says {}x{}",
                path.display(),
                seq.nrows(),
                seq.ncols(),
                f.length,
                manifest.dim
            )));
        }
        sequences.push(seq);
    }
    SequenceDataset::new(sequences)
}

/// One row per iteration: `iter,G,expected_loglik,shrinkage,markov,entropy,penalty,K_1..K_M,pruned_this_iter`.
/// M is the initial layer count; layers folded into the bias are written as 1.
pub fn write_trace(path: &Path, report: &FitReport, initial_layers: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["iter", "G", "expected_loglik", "shrinkage", "markov", "entropy", "penalty"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=initial_layers).map(|m| format!("K_{m}")));
    header.push("pruned_this_iter".into());
    w.write_record(&header)?;
    for rec in &report.trace {
        let t = &rec.terms;
        let mut row: Vec<String> = [t.total, t.expected_loglik, t.shrinkage_term, t.markov_term, t.entropy, t.penalty]
            .iter()
            .map(|v| v.to_string())
            .collect();
        row.insert(0, rec.iteration.to_string());
        row.extend((0..initial_layers).map(|m| rec.states.get(m).copied().unwrap_or(1).to_string()));
        row.push(rec.pruned_states().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
