// SPDX-License-Identifier: MIT
//! The four pipelines behind the CLI subcommands.

use crate::data::{read_json, standardize, write_csv, write_json, Dataset, Manifest};
use crate::CliError;
use gnies::graphs::{
    dag_to_cpdag, dag_to_icpdag, enumerate_class_capped, h_equivalent, Dag, GraphClass,
    TargetFamily, TargetSet, DEFAULT_CLASS_CAP,
};
use gnies::metrics::{tdp_fdp, MetricReport};
use gnies::scm::{random_scm, GenParams, InterventionKind, ScmModel};
use gnies::score::{ScoreCache, SufficientStats};
use gnies::search::{gnies_fit_cached, pool_stats, FitMethod, FitOptions, SearchResult};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Full experiment description; the optional config file for `generate` and
/// `path` uses this schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub gen: GenParams,
    /// Per-environment sample sizes; a single entry is broadcast.
    pub ns: Vec<usize>,
    /// Seed for drawing the samples (the model is drawn from `gen.seed`).
    pub data_seed: u64,
    pub out_dir: PathBuf,
}

impl GenerateConfig {
    fn env_sizes(&self) -> Result<Vec<usize>, CliError> {
        let k = self.gen.n_envs;
        let ns = match self.ns.as_slice() {
            [] => return Err(CliError::Config("no sample sizes given".into())),
            [n] => vec![*n; k],
            other if other.len() == k => other.to_vec(),
            other => {
                return Err(CliError::Config(format!(
                    "got {} sample sizes for {k} environments",
                    other.len()
                )))
            }
        };
        if ns.iter().any(|&n| n < 2) {
            return Err(CliError::Config(
                "each environment needs at least 2 samples".into(),
            ));
        }
        Ok(ns)
    }
}

/// Draws a random model and writes `model.json`, `targets.json`,
/// `manifest.json` and one CSV per environment into the output directory.
pub fn generate(cfg: &GenerateConfig) -> Result<Manifest, CliError> {
    let ns = cfg.env_sizes()?;
    let drawn = random_scm(&cfg.gen)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    write_json(&cfg.out_dir.join("model.json"), &drawn.model)?;
    write_json(&cfg.out_dir.join("targets.json"), &drawn.targets)?;
    let manifest = Manifest {
        p: cfg.gen.p,
        n_envs: cfg.gen.n_envs,
        ns: ns.clone(),
        seed: cfg.gen.seed,
        data_seed: cfg.data_seed,
        intervention_kind: cfg.gen.intervention_kind,
        env_targets: drawn.env_targets.clone(),
        targets: drawn.targets.to_vec(),
        topological_order: drawn.topological_order.clone(),
    };
    write_json(&cfg.out_dir.join("manifest.json"), &manifest)?;
    for (e, &n) in ns.iter().enumerate() {
        let x = drawn.model.sample(e, n, cfg.data_seed)?;
        write_csv(&cfg.out_dir.join(format!("env_{e}.csv")), &x)?;
    }
    Ok(manifest)
}

/// Fit settings shared by `fit` and `path`.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Explicit penalization; wins over `lambda_prime`.
    pub lambda: Option<f64>,
    /// Penalization as a multiple of `ln N`; `0.5` is the BIC scale.
    pub lambda_prime: Option<f64>,
    /// Targets known in advance (kept in the estimate).
    pub known_targets: Vec<usize>,
    /// Fixes the target set exactly: runs the inner procedure only.
    pub fixed_targets: Option<Vec<usize>>,
    pub standardize: bool,
    pub max_targets: Option<usize>,
    pub rank_most_variable_first: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: FitMethod::Greedy,
            lambda: None,
            lambda_prime: None,
            known_targets: Vec::new(),
            fixed_targets: None,
            standardize: false,
            max_targets: None,
            rank_most_variable_first: true,
        }
    }
}

impl FitConfig {
    fn resolve_lambda(&self, n_total: usize) -> (f64, Option<f64>) {
        match (self.lambda, self.lambda_prime) {
            (Some(l), _) => (l, None),
            (None, Some(lp)) => (lp * (n_total as f64).ln(), Some(lp)),
            (None, None) => (0.5 * (n_total as f64).ln(), Some(0.5)),
        }
    }
}

fn stats_of(ds: &Dataset, standardize_data: bool) -> Result<SufficientStats, CliError> {
    let mut envs = ds.envs.clone();
    if standardize_data {
        standardize(&mut envs)?;
    }
    Ok(SufficientStats::from_data(&envs)?)
}

fn fit_stats(
    stats: &SufficientStats,
    cfg: &FitConfig,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<SearchResult, CliError> {
    let p = stats.p();
    let (method, known) = match &cfg.fixed_targets {
        Some(fixed) => (FitMethod::Inner, fixed.clone()),
        None => (cfg.method, cfg.known_targets.clone()),
    };
    let known_targets =
        TargetSet::new(known, p).map_err(|e| CliError::Config(format!("bad targets: {e}")))?;
    let opts = FitOptions {
        known_targets,
        max_targets: cfg.max_targets,
        rank_most_variable_first: cfg.rank_most_variable_first,
        use_cache: true,
    };
    if method == FitMethod::PooledGes {
        // pool once so the shared cache keyspace matches the statistics
        let pooled = pool_stats(stats);
        let mut res = gnies_fit_cached(&pooled, lambda, FitMethod::Inner, &opts, cache)?;
        res.method = FitMethod::PooledGes;
        return Ok(res);
    }
    Ok(gnies_fit_cached(stats, lambda, method, &opts, cache)?)
}

/// Runs one fit over a dataset.
pub fn fit(ds: &Dataset, cfg: &FitConfig) -> Result<SearchResult, CliError> {
    let stats = stats_of(ds, cfg.standardize)?;
    let (lambda, _) = cfg.resolve_lambda(stats.n_total());
    fit_stats(&stats, cfg, lambda, &ScoreCache::new())
}

/// One row of a regularization path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRow {
    pub lambda_prime: f64,
    pub lambda: f64,
    pub n_total: usize,
    /// Marks the BIC-scale row (`lambda_prime = 1/2`).
    pub bic: bool,
    pub result: SearchResult,
}

/// Fits once per grid value of `lambda_prime` (with `lambda = lp * ln N`),
/// sharing one local-score cache across the grid. The BIC row
/// (`lambda_prime = 1/2`) is added when missing. Jobs run on the worker pool
/// sized by `threads` (or the default); rows come back in grid order.
pub fn regularization_path(
    ds: &Dataset,
    grid: &[f64],
    cfg: &FitConfig,
    threads: Option<usize>,
) -> Result<Vec<PathRow>, CliError> {
    if grid.is_empty() {
        return Err(CliError::Config("empty lambda grid".into()));
    }
    if grid.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(CliError::Config(
            "lambda grid values must be positive".into(),
        ));
    }
    let mut grid: Vec<f64> = grid.to_vec();
    if !grid.contains(&0.5) {
        grid.push(0.5);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    grid.dedup();

    let stats = stats_of(ds, cfg.standardize)?;
    let pooled;
    let (stats_ref, effective_cfg) =
        if cfg.method == FitMethod::PooledGes && cfg.fixed_targets.is_none() {
            pooled = pool_stats(&stats);
            (
                &pooled,
                FitConfig {
                    method: FitMethod::Inner,
                    ..cfg.clone()
                },
            )
        } else {
            (&stats, cfg.clone())
        };
    let n_total = stats.n_total();
    let cache = ScoreCache::new();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let rows: Vec<Result<PathRow, CliError>> = pool.install(|| {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|&lp| {
                let lambda = lp * (n_total as f64).ln();
                let mut result = fit_stats(stats_ref, &effective_cfg, lambda, &cache)?;
                if cfg.method == FitMethod::PooledGes {
                    result.method = FitMethod::PooledGes;
                }
                Ok(PathRow {
                    lambda_prime: lp,
                    lambda,
                    n_total,
                    bic: lp == 0.5,
                    result,
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

/// Which ground-truth class `eval` compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthKind {
    /// Decide from the manifest: hard interventions use the hard-intervention
    /// class, noise interventions the I-equivalence class.
    Auto,
    Imec,
    Hmec,
}

/// One evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    #[serde(flatten)]
    pub report: MetricReport,
    pub method: FitMethod,
    pub lambda: f64,
    pub result_file: String,
}

fn truth_class(
    model: &ScmModel,
    manifest: &Manifest,
    kind: TruthKind,
    cap: usize,
) -> Result<(GraphClass, bool), CliError> {
    let dag: Dag = model.graph().map_err(gnies::scm::ScmError::from)?;
    let hard = match kind {
        TruthKind::Auto => manifest.intervention_kind == InterventionKind::Hard,
        TruthKind::Imec => false,
        TruthKind::Hmec => true,
    };
    if hard {
        // the hard-intervention class: Markov equivalent graphs whose cut
        // skeletons agree for every per-environment target set
        let family =
            TargetFamily::new(
                std::iter::once(TargetSet::empty()).chain(
                    manifest.env_targets.iter().flatten().map(|&t| {
                        TargetSet::new([t], model.p()).expect("manifest target in range")
                    }),
                ),
            );
        let (mec, truncated) =
            enumerate_class_capped(&dag_to_cpdag(&dag), &TargetSet::empty(), cap)?;
        let members: Vec<Dag> = mec
            .members()
            .filter(|d| {
                // the family contains the empty set, so it is conservative
                h_equivalent(&dag, d, &family).expect("conservative family over equal node sets")
            })
            .cloned()
            .collect();
        Ok((GraphClass::from_members(members)?, truncated))
    } else {
        let targets = TargetSet::new(manifest.targets.iter().copied(), model.p())
            .map_err(|e| CliError::Data(format!("manifest targets: {e}")))?;
        let c = dag_to_icpdag(&dag, &targets);
        Ok(enumerate_class_capped(&c, &targets, cap)?)
    }
}

/// Compares fit results against the ground truth of a generated dataset.
pub fn evaluate(
    truth_dir: &Path,
    result_files: &[PathBuf],
    kind: TruthKind,
    cap: Option<usize>,
) -> Result<Vec<EvalRow>, CliError> {
    let cap = cap.unwrap_or(DEFAULT_CLASS_CAP);
    let model: ScmModel = read_json(&truth_dir.join("model.json"))?;
    let manifest: Manifest = read_json(&truth_dir.join("manifest.json"))?;
    let (truth, truth_truncated) = truth_class(&model, &manifest, kind, cap)?;

    let mut rows = Vec::with_capacity(result_files.len());
    for file in result_files {
        let result: SearchResult = read_json(file)?;
        if result.icpdag.p() != model.p() {
            return Err(CliError::Data(format!(
                "{}: result has p = {}, model has p = {}",
                file.display(),
                result.icpdag.p(),
                model.p()
            )));
        }
        let (est, est_truncated) = enumerate_class_capped(&result.icpdag, &result.targets, cap)?;
        let mut report = tdp_fdp(&truth, &est)?;
        report.truncated = truth_truncated || est_truncated;
        rows.push(EvalRow {
            report,
            method: result.method,
            lambda: result.lambda,
            result_file: file.display().to_string(),
        });
    }
    Ok(rows)
}
