// SPDX-License-Identifier: MIT
//! `gnies` command line: generate synthetic multi-environment datasets, fit
//! equivalence classes, sweep the regularization path, and evaluate results
//! against ground truth. All outputs are JSON (or JSON lines) for downstream
//! tooling.

use clap::{Args, Parser, Subcommand, ValueEnum};
use gnies::scm::{GenParams, InterventionKind};
use gnies::search::FitMethod;
use gnies_cli::data::{load_dataset, read_json, write_atomic};
use gnies_cli::pipeline::{
    evaluate, fit, generate, regularization_path, FitConfig, GenerateConfig, TruthKind,
};
use gnies_cli::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gnies",
    version,
    about = "Greedy noise-interventional equivalence search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-environment dataset with ground truth
    Generate(GenerateArgs),
    /// Fit an equivalence class to a dataset
    Fit(FitArgs),
    /// Fit once per value of a lambda' grid (lambda = lambda' * ln N)
    Path(PathArgs),
    /// Evaluate result files against a generated dataset's ground truth
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the dataset
    #[arg(long)]
    out: PathBuf,
    /// JSON config file with the GenerateConfig schema; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of nodes
    #[arg(short, long)]
    p: Option<usize>,
    /// Expected number of edges per node
    #[arg(long)]
    avg_degree: Option<f64>,
    /// Edge-weight range, e.g. "0.5,1"
    #[arg(long, value_parser = parse_range)]
    weight_range: Option<(f64, f64)>,
    /// Base noise-variance range, e.g. "1,2"
    #[arg(long, value_parser = parse_range)]
    variance_range: Option<(f64, f64)>,
    /// Intervention noise-variance range, e.g. "5,10"
    #[arg(long, value_parser = parse_range)]
    intervention_variance_range: Option<(f64, f64)>,
    /// Number of environments (the first is observational)
    #[arg(long)]
    envs: Option<usize>,
    /// Intervention kind
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Model seed
    #[arg(long)]
    seed: Option<u64>,
    /// Sample seed (defaults to the model seed)
    #[arg(long)]
    data_seed: Option<u64>,
    /// Samples per environment: one value or a comma list, e.g. "1000"
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Noise,
    Hard,
}

impl From<KindArg> for InterventionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Noise => InterventionKind::Noise,
            KindArg::Hard => InterventionKind::Hard,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Greedy,
    Rank,
    Inner,
    PooledGes,
}

impl From<MethodArg> for FitMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Greedy => FitMethod::Greedy,
            MethodArg::Rank => FitMethod::Rank,
            MethodArg::Inner => FitMethod::Inner,
            MethodArg::PooledGes => FitMethod::PooledGes,
        }
    }
}

#[derive(Args)]
struct FitCommon {
    /// Dataset directory (env_*.csv) or a single CSV with an `env` column
    #[arg(long)]
    data: PathBuf,
    /// Search method
    #[arg(long, value_enum, default_value = "greedy")]
    method: MethodArg,
    /// Run plain GES on the pooled data (same as --method pooled-ges)
    #[arg(long)]
    pooled_ges: bool,
    /// Known intervention targets, e.g. "0,2" (kept in the estimate)
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<usize>>,
    /// Fix the target set exactly and run only the inner procedure
    #[arg(long, value_delimiter = ',')]
    fixed_targets: Option<Vec<usize>>,
    /// Standardize each variable by its pooled mean and standard deviation
    #[arg(long)]
    standardize: bool,
    /// Cap on the number of estimated targets
    #[arg(long)]
    max_targets: Option<usize>,
    /// Rank method: add least-variable noise estimates first
    #[arg(long)]
    rank_least_variable_first: bool,
    /// Output file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl FitCommon {
    fn config(&self) -> FitConfig {
        FitConfig {
            method: if self.pooled_ges {
                FitMethod::PooledGes
            } else {
                self.method.into()
            },
            lambda: None,
            lambda_prime: None,
            known_targets: self.targets.clone().unwrap_or_default(),
            fixed_targets: self.fixed_targets.clone(),
            standardize: self.standardize,
            max_targets: self.max_targets,
            rank_most_variable_first: !self.rank_least_variable_first,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: FitCommon,
    /// Penalization strength (overrides --lambda-prime)
    #[arg(long)]
    lambda: Option<f64>,
    /// Penalization as a multiple of ln N (default 0.5, the BIC scale)
    #[arg(long)]
    lambda_prime: Option<f64>,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    common: FitCommon,
    /// Comma-separated lambda' grid, e.g. "0.01,0.1,0.5,2"
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TruthArg {
    Auto,
    Imec,
    Hmec,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory holding model.json and manifest.json
    #[arg(long)]
    truth: PathBuf,
    /// Result JSON files produced by `fit` or extracted from `path` rows
    #[arg(long, required = true, num_args = 1..)]
    result: Vec<PathBuf>,
    /// Ground-truth class to compare against
    #[arg(long, value_enum, default_value = "auto")]
    truth_class: TruthArg,
    /// Cap on class enumeration size
    #[arg(long)]
    cap: Option<usize>,
    /// Output file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected \"lo,hi\"".into());
    }
    let lo = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("GNIES_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|e| CliError::Config(format!("GNIES_THREADS: {e}"))),
        Err(_) => Ok(None),
    }
}

fn emit(out: Option<&PathBuf>, content: String) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, content.as_bytes()),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => {
            let mut cfg = match &args.config {
                Some(path) => read_json::<GenerateConfig>(path)?,
                None => GenerateConfig {
                    gen: GenParams {
                        p: 10,
                        avg_degree: 2.7,
                        weight_range: (0.5, 1.0),
                        variance_range: (1.0, 2.0),
                        intervention_variance_range: (5.0, 10.0),
                        n_envs: 5,
                        intervention_kind: InterventionKind::Noise,
                        seed: 0,
                    },
                    ns: vec![1000],
                    data_seed: 0,
                    out_dir: args.out.clone(),
                },
            };
            cfg.out_dir = args.out.clone();
            if let Some(p) = args.p {
                cfg.gen.p = p;
            }
            if let Some(d) = args.avg_degree {
                cfg.gen.avg_degree = d;
            }
            if let Some(r) = args.weight_range {
                cfg.gen.weight_range = r;
            }
            if let Some(r) = args.variance_range {
                cfg.gen.variance_range = r;
            }
            if let Some(r) = args.intervention_variance_range {
                cfg.gen.intervention_variance_range = r;
            }
            if let Some(k) = args.envs {
                cfg.gen.n_envs = k;
            }
            if let Some(k) = args.kind {
                cfg.gen.intervention_kind = k.into();
            }
            if let Some(s) = args.seed {
                cfg.gen.seed = s;
            }
            cfg.data_seed = args.data_seed.or(args.seed).unwrap_or(cfg.data_seed);
            if let Some(ns) = args.n {
                cfg.ns = ns;
            }
            generate(&cfg)?;
            Ok(())
        }
        Command::Fit(args) => {
            let ds = load_dataset(&args.common.data)?;
            let mut cfg = args.common.config();
            cfg.lambda = args.lambda;
            cfg.lambda_prime = args.lambda_prime;
            let result = fit(&ds, &cfg)?;
            let json = serde_json::to_string(&result).map_err(|e| CliError::Data(e.to_string()))?;
            emit(args.common.out.as_ref(), format!("{json}\n"))
        }
        Command::Path(args) => {
            let ds = load_dataset(&args.common.data)?;
            let cfg = args.common.config();
            let rows = regularization_path(&ds, &args.grid, &cfg, threads_from_env()?)?;
            let mut out = String::new();
            for row in rows {
                out.push_str(
                    &serde_json::to_string(&row).map_err(|e| CliError::Data(e.to_string()))?,
                );
                out.push('\n');
            }
            emit(args.common.out.as_ref(), out)
        }
        Command::Eval(args) => {
            let kind = match args.truth_class {
                TruthArg::Auto => TruthKind::Auto,
                TruthArg::Imec => TruthKind::Imec,
                TruthArg::Hmec => TruthKind::Hmec,
            };
            let rows = evaluate(&args.truth, &args.result, kind, args.cap)?;
            let mut out = String::new();
            for row in rows {
                out.push_str(
                    &serde_json::to_string(&row).map_err(|e| CliError::Data(e.to_string()))?,
                );
                out.push('\n');
            }
            emit(args.out.as_ref(), out)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("gnies: {e}");
        std::process::exit(e.exit_code());
    }
}
