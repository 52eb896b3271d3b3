use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use fabfhmm::asymptotics::verify_regime;
use fabfhmm::fab::{fit, score, FitConfig, Variant};
use fabfhmm::harness::{eval_heldout, run_experiment, ExperimentConfig, Preset};
use fabfhmm::io::{load_model, read_split, save_model, write_split, write_trace};
use fabfhmm::simulate::{paper_ground_truth, random_parameters, sample, SimulationConfig};
use fabfhmm::variational::CollapsedEstimates;
use fabfhmm::ModelStructure;

#[derive(Parser)]
#[command(name = "fabfhmm", version, about = "Factorial HMMs with automatic state pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/test sequences from a ground-truth model.
    Generate(GenerateArgs),
    /// Fit a model to a dataset split.
    Fit(FitArgs),
    /// Held-out log-likelihood of a saved model.
    Eval(EvalArgs),
    /// Multi-trial comparison of the variants.
    Experiment(ExperimentArgs),
    /// Compare the Bernoulli-sum approximations with simulation.
    VerifyAsymptotics(AsymptoticsArgs),
    /// Objective value of a saved model on a dataset split.
    Score(ScoreArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "paper")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train_len: usize,
    #[arg(long, default_value_t = 2000)]
    test_len: usize,
    /// Ground-truth layer sizes for the custom preset, e.g. 2,3.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 2, 3])]
    truth_states: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// JSON file with any FitConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 10)]
    states: usize,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    prune_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = fabfhmm::flat::DEFAULT_PRODUCT_CAP)]
    cap: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON file with any ExperimentConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_len: Option<usize>,
    #[arg(long)]
    test_len: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    prune_threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AsymptoticsArgs {
    /// y ~ Binomial(N, P), written binomial:N,P.
    #[arg(long, default_value = "binomial:1000,0.1")]
    regime: String,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value = "rfab")]
    variant: Variant,
    #[arg(long, default_value_t = 200)]
    max_sweeps: usize,
}

fn parse_preset(s: &str) -> Result<Preset> {
    match s {
        "paper" => Ok(Preset::Paper),
        "custom" => Ok(Preset::Custom),
        other => bail!("unknown preset {other:?} (expected paper or custom)"),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let truth = match parse_preset(&a.preset)? {
        Preset::Paper => paper_ground_truth(a.seed),
        Preset::Custom => random_parameters(&ModelStructure::new(a.truth_states, a.dim)?, a.seed),
    };
    let (data, _) = sample(&SimulationConfig::new(truth.clone(), vec![a.train_len, a.test_len], a.seed))?;
    let train = fabfhmm::SequenceDataset::new(vec![data.sequences[0].clone()])?;
    let test = fabfhmm::SequenceDataset::new(vec![data.sequences[1].clone()])?;
    write_split(&a.out, "train", &train)?;
    write_split(&a.out, "test", &test)?;
    save_model(&a.out.join("truth.json"), &truth)?;
    print_json(&json!({ "out": a.out, "train_len": a.train_len, "test_len": a.test_len }))
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let mut config: FitConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        config.variant = v;
    }
    if let Some(v) = a.max_iters {
        config.max_iters = v;
    }
    if let Some(v) = a.prune_threshold {
        config.prune_threshold = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    let data = read_split(&a.data, &a.split)?;
    let structure = ModelStructure::new(vec![a.states; a.layers], data.dim())?;
    let report = fit(&data, &structure, &config)?;
    save_model(&a.out, &report.params)?;
    if let Some(t) = &a.trace {
        write_trace(t, &report, a.layers)?;
    }
    print_json(&json!({
        "variant": report.variant,
        "states": report.states(),
        "iterations": report.iterations(),
        "converged": report.converged,
        "final_structure_iteration": report.final_structure_iteration,
        "G": report.fic_score,
    }))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let data = read_split(&a.data, &a.split)?;
    let held = eval_heldout(&params, &CollapsedEstimates::from_params(&params), &data, a.cap)?;
    print_json(&serde_json::to_value(held)?)
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_config(a.config.as_deref())?;
    if let Some(v) = &a.preset {
        config.preset = parse_preset(v)?;
    }
    if let Some(v) = a.variants {
        config.variants = v;
    }
    if let Some(v) = a.trials {
        config.trials = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.train_len {
        config.train_len = v;
    }
    if let Some(v) = a.test_len {
        config.test_len = v;
    }
    if let Some(v) = a.max_iters {
        config.fit.max_iters = v;
    }
    if let Some(v) = a.prune_threshold {
        config.fit.prune_threshold = v;
    }
    if let Some(v) = a.out {
        config.out_dir = Some(v);
    }
    let table = run_experiment(&config)?;
    print_json(&json!({ "summaries": table.summaries, "failures": table.failures }))
}

fn parse_regime(s: &str) -> Result<(usize, f64)> {
    let rest = s
        .strip_prefix("binomial:")
        .ok_or_else(|| anyhow!("regime must look like binomial:N,P"))?;
    let (n, p) = rest.split_once(',').ok_or_else(|| anyhow!("regime must look like binomial:N,P"))?;
    Ok((n.trim().parse()?, p.trim().parse()?))
}

fn asymptotics_cmd(a: AsymptoticsArgs) -> Result<()> {
    let (n, p) = parse_regime(&a.regime)?;
    let rows = verify_regime(n, p, a.samples, a.seed)?;
    if a.json {
        return print_json(&serde_json::to_value(&rows)?);
    }
    println!("y ~ Binomial({n}, {p}), mean {}, {} samples, seed {}", n as f64 * p, a.samples, a.seed);
    println!(
        "{:<56} {:>14} {:>14} {:>10} {:>12} {:>10}",
        "quantity", "approximation", "monte carlo", "std err", "|mc - ref|", "bound"
    );
    for r in rows {
        let dev = if r.reference.is_nan() { f64::NAN } else { (r.monte_carlo - r.reference).abs() };
        println!(
            "{:<56} {:>14.6} {:>14.6} {:>10.2e} {:>12.3e} {:>10.3e}",
            r.quantity, r.approximation, r.monte_carlo, r.std_error, dev, r.bound
        );
    }
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let data = read_split(&a.data, &a.split)?;
    let config = FitConfig {
        variant: a.variant,
        max_iters: a.max_sweeps,
        ..FitConfig::default()
    };
    let terms = score(&data, &params, &config)?;
    print_json(&json!({
        "variant": a.variant,
        "G": terms.total,
        "terms": terms,
        "variational_bound": terms.variational_bound(),
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::VerifyAsymptotics(a) => asymptotics_cmd(a),
        Command::Score(a) => score_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<fabfhmm::FhmmError>() {
                Some(fe) => fe.kind(),
                None => "error",
            };
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
