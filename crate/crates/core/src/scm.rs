// SPDX-License-Identifier: MIT
//! Linear Gaussian structural causal models over multiple environments:
//! entailed covariances, sampling, random generation, noise and hard
//! interventions, and the brute-force distribution-equivalence oracle used to
//! verify the graphical characterization on small instances.
//!
//! A model is a connectivity matrix `B` (with `B[i][j] != 0` meaning the edge
//! `j -> i`) together with one vector of noise variances per environment.
//! Data is centered, so noise means are fixed to zero throughout. Hard
//! interventions are stored as per-environment annotations; the rows of `B`
//! into a hard target are zeroed when that environment's distribution is
//! formed, leaving the shared `B` untouched.

use crate::graphs::{enumerate_all_dags, Dag, GraphClass, GraphError, TargetSet, MAX_ENUM_NODES};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScmError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("environment index {0} out of range ({1} environments)")]
    EnvOutOfRange(usize, usize),
    #[error("noise variance must be strictly positive (env {env}, node {node})")]
    NonPositiveVariance { env: usize, node: usize },
    #[error("model must have at least one environment")]
    NoEnvironments,
    #[error("covariance is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("singular covariance submatrix: the model is numerically degenerate")]
    SingularCovariance,
    #[error("invalid generation parameters: {0}")]
    BadGenParams(&'static str),
    #[error("tolerance must be strictly positive")]
    NonPositiveTolerance,
    #[error("sample size must be at least 1")]
    EmptySample,
}

/// Kind of intervention applied in the interventional environments of a
/// generated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    /// The target keeps its parents; only its noise variance changes.
    Noise,
    /// The target is severed from its parents and its variance changes.
    Hard,
}

/// A symmetric positive-definite covariance matrix entailed by a model for
/// one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvCovariance {
    sigma: DMatrix<f64>,
}

impl EnvCovariance {
    /// Validates symmetry (within `1e-12`) and positive-definiteness.
    pub fn new(sigma: DMatrix<f64>) -> Result<Self, ScmError> {
        let p = sigma.nrows();
        if sigma.ncols() != p {
            return Err(ScmError::NotPositiveDefinite);
        }
        for i in 0..p {
            for j in (i + 1)..p {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 {
                    return Err(ScmError::NotPositiveDefinite);
                }
            }
        }
        if sigma.clone().cholesky().is_none() {
            return Err(ScmError::NotPositiveDefinite);
        }
        Ok(EnvCovariance { sigma })
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }
}

/// A linear Gaussian SCM with per-environment noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmModel {
    /// Connectivity matrix; `b[(i, j)] != 0` encodes the edge `j -> i`.
    b: DMatrix<f64>,
    /// Per-environment diagonal noise variances.
    omegas: Vec<DVector<f64>>,
    /// Per-environment hard-intervention targets (empty for noise models).
    hard_targets: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    omegas: Vec<Vec<f64>>,
    hard_targets: Vec<Vec<usize>>,
}

impl ScmModel {
    /// Builds a model, validating that the nonzero pattern of `b` is a DAG,
    /// that all variances are strictly positive, and that hard-target
    /// annotations are well-formed. An empty `hard_targets` means a pure
    /// noise model.
    pub fn new(
        b: DMatrix<f64>,
        omegas: Vec<DVector<f64>>,
        hard_targets: Vec<Vec<usize>>,
    ) -> Result<Self, ScmError> {
        let p = b.nrows();
        if b.ncols() != p {
            return Err(ScmError::BadGenParams("B must be square"));
        }
        if omegas.is_empty() {
            return Err(ScmError::NoEnvironments);
        }
        for (e, omega) in omegas.iter().enumerate() {
            if omega.len() != p {
                return Err(ScmError::BadGenParams("omega length must equal p"));
            }
            for (node, &w) in omega.iter().enumerate() {
                if w.is_nan() || w <= 0.0 {
                    return Err(ScmError::NonPositiveVariance { env: e, node });
                }
            }
        }
        let hard_targets = if hard_targets.is_empty() {
            vec![Vec::new(); omegas.len()]
        } else {
            hard_targets
        };
        if hard_targets.len() != omegas.len() {
            return Err(ScmError::BadGenParams(
                "hard_targets must have one entry per environment",
            ));
        }
        for ts in &hard_targets {
            for &t in ts {
                if t >= p {
                    return Err(GraphError::NodeOutOfRange(t, p).into());
                }
            }
        }
        let model = ScmModel {
            b,
            omegas,
            hard_targets,
        };
        model.graph()?; // acyclicity of the nonzero pattern
        Ok(model)
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    #[inline]
    pub fn n_envs(&self) -> usize {
        self.omegas.len()
    }

    #[inline]
    pub fn connectivity(&self) -> &DMatrix<f64> {
        &self.b
    }

    #[inline]
    pub fn omega(&self, e: usize) -> &DVector<f64> {
        &self.omegas[e]
    }

    #[inline]
    pub fn hard_targets(&self, e: usize) -> &[usize] {
        &self.hard_targets[e]
    }

    pub fn is_hard(&self) -> bool {
        self.hard_targets.iter().any(|t| !t.is_empty())
    }

    /// The graph underlying the model: edge `j -> i` iff `B[(i, j)] != 0`.
    pub fn graph(&self) -> Result<Dag, GraphError> {
        let p = self.p();
        let mut edges = Vec::new();
        for i in 0..p {
            for j in 0..p {
                if self.b[(i, j)] != 0.0 {
                    edges.push((j, i));
                }
            }
        }
        Dag::new(p, &edges)
    }

    fn check_env(&self, e: usize) -> Result<(), ScmError> {
        if e >= self.n_envs() {
            Err(ScmError::EnvOutOfRange(e, self.n_envs()))
        } else {
            Ok(())
        }
    }

    /// Connectivity matrix effective in environment `e`: rows into hard
    /// targets are zeroed.
    pub fn effective_b(&self, e: usize) -> DMatrix<f64> {
        let mut b = self.b.clone();
        for &t in &self.hard_targets[e] {
            for j in 0..self.p() {
                b[(t, j)] = 0.0;
            }
        }
        b
    }

    /// The covariance entailed for environment `e`:
    /// `(I - B)^-1 Omega (I - B)^-T` with the environment-effective `B`.
    pub fn entailed_covariance(&self, e: usize) -> Result<EnvCovariance, ScmError> {
        self.check_env(e)?;
        let p = self.p();
        let b = self.effective_b(e);
        let i_minus_b = DMatrix::<f64>::identity(p, p) - b;
        let inv = i_minus_b
            .try_inverse()
            .ok_or(ScmError::SingularCovariance)?;
        let omega = DMatrix::from_diagonal(&self.omegas[e]);
        let sigma = &inv * omega * inv.transpose();
        // symmetrize away round-off before validation
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        EnvCovariance::new(sigma)
    }

    /// Draws `n` i.i.d. samples from environment `e` as an `n x p` matrix.
    ///
    /// Uses a ChaCha8 generator seeded with `seed` on stream `e`, so draws
    /// are reproducible per environment and independent across environments.
    pub fn sample(&self, e: usize, n: usize, seed: u64) -> Result<DMatrix<f64>, ScmError> {
        if n == 0 {
            return Err(ScmError::EmptySample);
        }
        let cov = self.entailed_covariance(e)?;
        let p = self.p();
        let chol = cov
            .matrix()
            .clone()
            .cholesky()
            .ok_or(ScmError::NotPositiveDefinite)?;
        let l = chol.l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(e as u64);
        let mut out = DMatrix::<f64>::zeros(n, p);
        let mut z = DVector::<f64>::zeros(p);
        for r in 0..n {
            for k in 0..p {
                z[k] = rng.sample(StandardNormal);
            }
            let x = &l * &z;
            for k in 0..p {
                out[(r, k)] = x[k];
            }
        }
        Ok(out)
    }

    /// Targets whose stored noise variance differs between some pair of
    /// environments (exact inequality).
    pub fn intervention_targets(&self) -> TargetSet {
        let p = self.p();
        let mut targets = Vec::new();
        for j in 0..p {
            let first = self.omegas[0][j];
            if self.omegas.iter().any(|o| o[j] != first) {
                targets.push(j);
            }
        }
        TargetSet::new(targets, p).expect("indices in range")
    }

    /// Intervention-heterogeneity: for every pair of environments, the
    /// variances that change between them change by pairwise different
    /// factors.
    pub fn check_intervention_heterogeneity(&self) -> bool {
        let p = self.p();
        for e in 0..self.n_envs() {
            for f in (e + 1)..self.n_envs() {
                let changed: Vec<usize> = (0..p)
                    .filter(|&j| self.omegas[e][j] != self.omegas[f][j])
                    .collect();
                for (a, &i) in changed.iter().enumerate() {
                    for &j in changed.iter().skip(a + 1) {
                        let ri = self.omegas[e][i] / self.omegas[f][i];
                        let rj = self.omegas[e][j] / self.omegas[f][j];
                        if ri == rj {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

impl Serialize for ScmModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let p = self.p();
        ModelJson {
            b: (0..p)
                .map(|i| (0..p).map(|j| self.b[(i, j)]).collect())
                .collect(),
            omegas: self
                .omegas
                .iter()
                .map(|o| o.iter().copied().collect())
                .collect(),
            hard_targets: self.hard_targets.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ScmModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = ModelJson::deserialize(deserializer)?;
        let p = raw.b.len();
        if raw.b.iter().any(|row| row.len() != p) {
            return Err(D::Error::custom("B must be square"));
        }
        let b = DMatrix::from_fn(p, p, |i, j| raw.b[i][j]);
        let omegas = raw.omegas.into_iter().map(DVector::from_vec).collect();
        ScmModel::new(b, omegas, raw.hard_targets).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Random generation
// ---------------------------------------------------------------------------

/// Parameters for random model generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub p: usize,
    pub avg_degree: f64,
    pub weight_range: (f64, f64),
    pub variance_range: (f64, f64),
    pub intervention_variance_range: (f64, f64),
    pub n_envs: usize,
    pub intervention_kind: InterventionKind,
    pub seed: u64,
}

impl GenParams {
    fn validate(&self) -> Result<(), ScmError> {
        if self.p < 2 {
            return Err(ScmError::BadGenParams("p must be at least 2"));
        }
        if self.n_envs < 1 {
            return Err(ScmError::BadGenParams("n_envs must be at least 1"));
        }
        if self.n_envs > self.p {
            return Err(ScmError::BadGenParams(
                "n_envs must not exceed p (one distinct target per interventional environment)",
            ));
        }
        if self.avg_degree < 0.0 {
            return Err(ScmError::BadGenParams("avg_degree must be non-negative"));
        }
        for (lo, hi) in [
            self.weight_range,
            self.variance_range,
            self.intervention_variance_range,
        ] {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(ScmError::BadGenParams("range bounds must be ordered"));
            }
        }
        if self.weight_range.0 < 0.0 {
            return Err(ScmError::BadGenParams("weights are positive"));
        }
        if self.variance_range.0 <= 0.0 || self.intervention_variance_range.0 <= 0.0 {
            return Err(ScmError::BadGenParams("variances must be positive"));
        }
        Ok(())
    }
}

/// A randomly generated model together with its ground truth.
#[derive(Debug, Clone)]
pub struct RandomScm {
    pub model: ScmModel,
    /// Union of targets intervened on across environments.
    pub targets: TargetSet,
    /// Per-environment intervened target (`None` for the observational env).
    pub env_targets: Vec<Option<usize>>,
    /// Topological order used to orient the Erdős–Rényi skeleton.
    pub topological_order: Vec<usize>,
}

/// Generates a random model per the synthetic-data protocol.
///
/// The graph is Erdős–Rényi with edge probability `avg_degree / (p - 1)`
/// applied over a uniformly random topological order; weights and base
/// variances are uniform in their ranges. Environment 0 is observational;
/// each subsequent environment intervenes on one distinct uniformly chosen
/// target, replacing its variance with a draw from the intervention range
/// and, for hard interventions, severing it from its parents.
pub fn random_scm(gp: &GenParams) -> Result<RandomScm, ScmError> {
    gp.validate()?;
    let p = gp.p;
    if p > crate::graphs::MAX_NODES {
        return Err(GraphError::TooManyNodes(p).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gp.seed);

    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng);

    let edge_prob = (gp.avg_degree / (p as f64 - 1.0)).min(1.0);
    let mut b = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for c in (a + 1)..p {
            if rng.random::<f64>() < edge_prob {
                let (from, to) = (order[a], order[c]);
                let w = rng.random_range(gp.weight_range.0..=gp.weight_range.1);
                b[(to, from)] = w; // edge from -> to
            }
        }
    }

    let base: Vec<f64> = (0..p)
        .map(|_| rng.random_range(gp.variance_range.0..=gp.variance_range.1))
        .collect();

    let mut candidates: Vec<usize> = (0..p).collect();
    candidates.shuffle(&mut rng);
    let chosen: Vec<usize> = candidates.into_iter().take(gp.n_envs - 1).collect();

    let mut omegas = Vec::with_capacity(gp.n_envs);
    let mut hard_targets = vec![Vec::new(); gp.n_envs];
    let mut env_targets = vec![None; gp.n_envs];
    omegas.push(DVector::from_vec(base.clone()));
    for (k, &t) in chosen.iter().enumerate() {
        let e = k + 1;
        let mut omega = base.clone();
        omega[t] =
            rng.random_range(gp.intervention_variance_range.0..=gp.intervention_variance_range.1);
        omegas.push(DVector::from_vec(omega));
        env_targets[e] = Some(t);
        if gp.intervention_kind == InterventionKind::Hard {
            hard_targets[e].push(t);
        }
    }

    let model = ScmModel::new(b, omegas, hard_targets)?;
    let targets = TargetSet::new(chosen, p)?;
    Ok(RandomScm {
        model,
        targets,
        env_targets,
        topological_order: order,
    })
}

// ---------------------------------------------------------------------------
// Distribution-equivalence oracle
// ---------------------------------------------------------------------------

/// Default tolerance for the population-level oracle; the matrices involved
/// are computed in double precision from well-conditioned systems.
pub const ORACLE_TOL: f64 = 1e-7;

/// Regression of node `i` on the set `s` under the population covariance:
/// returns the coefficient row (dense over `p`) and the residual variance.
fn population_regression(
    sigma: &DMatrix<f64>,
    i: usize,
    s: &[usize],
    p: usize,
) -> Result<(DVector<f64>, f64), ScmError> {
    let mut row = DVector::<f64>::zeros(p);
    if s.is_empty() {
        return Ok((row, sigma[(i, i)]));
    }
    let k = s.len();
    let a = DMatrix::from_fn(k, k, |r, c| sigma[(s[r], s[c])]);
    let rhs = DVector::from_fn(k, |r, _| sigma[(s[r], i)]);
    let chol = a.cholesky().ok_or(ScmError::SingularCovariance)?;
    let coef = chol.solve(&rhs);
    let mut resid = sigma[(i, i)];
    for (r, &node) in s.iter().enumerate() {
        resid -= coef[r] * sigma[(node, i)];
        row[node] = coef[r];
    }
    Ok((row, resid))
}

/// A member of the distribution-equivalence class together with its
/// recovered coefficients (shared across environments).
pub(crate) struct OracleMember {
    pub dag: Dag,
    pub b: DMatrix<f64>,
}

pub(crate) fn equivalence_oracle_members(
    m: &ScmModel,
    tol: f64,
) -> Result<Vec<OracleMember>, ScmError> {
    if tol <= 0.0 {
        return Err(ScmError::NonPositiveTolerance);
    }
    let p = m.p();
    if p > MAX_ENUM_NODES {
        return Err(GraphError::EnumerationTooLarge(p).into());
    }
    let sigmas: Vec<DMatrix<f64>> = (0..m.n_envs())
        .map(|e| m.entailed_covariance(e).map(|c| c.matrix().clone()))
        .collect::<Result<_, _>>()?;
    let eye = DMatrix::<f64>::identity(p, p);

    let mut members = Vec::new();
    'dags: for dag in enumerate_all_dags(p)? {
        let parent_sets: Vec<Vec<usize>> = (0..p).map(|i| dag.parents(i)).collect();
        let mut b_first: Option<DMatrix<f64>> = None;
        for sigma in &sigmas {
            let mut b = DMatrix::<f64>::zeros(p, p);
            let mut omega = DVector::<f64>::zeros(p);
            for i in 0..p {
                let (row, resid) = population_regression(sigma, i, &parent_sets[i], p)?;
                b.set_row(i, &row.transpose());
                omega[i] = resid;
            }
            // (a) the factorization must reconstruct the covariance
            let i_minus_b = &eye - &b;
            let inv = match i_minus_b.try_inverse() {
                Some(x) => x,
                None => continue 'dags,
            };
            let recon = &inv * DMatrix::from_diagonal(&omega) * inv.transpose();
            if (&recon - sigma).abs().max() > tol {
                continue 'dags;
            }
            // (b) coefficients must coincide across environments
            match &b_first {
                None => b_first = Some(b),
                Some(prev) => {
                    if (&b - prev).abs().max() > tol {
                        continue 'dags;
                    }
                }
            }
        }
        members.push(OracleMember {
            dag,
            b: b_first.expect("at least one environment"),
        });
    }
    Ok(members)
}

/// Brute-force class of DAGs supporting a model distribution-equivalent to
/// `m`: a DAG is included iff node-wise population regressions under each
/// environment's covariance reconstruct that covariance and the coefficients
/// coincide across environments.
pub fn equivalent_graphs_oracle(m: &ScmModel, tol: f64) -> Result<GraphClass, ScmError> {
    let members = equivalence_oracle_members(m, tol)?;
    GraphClass::from_members(members.into_iter().map(|om| om.dag)).map_err(ScmError::from)
}

/// Model-truthfulness check: for every member of the equivalence class with
/// recovered coefficients `B~`, the diagonal of `(I - B~)(I - B)^-1` must
/// have no entry with magnitude at most `tol`.
pub fn check_model_truthfulness(m: &ScmModel, tol: f64) -> Result<bool, ScmError> {
    if tol < 0.0 {
        return Err(ScmError::NonPositiveTolerance);
    }
    let members = equivalence_oracle_members(m, ORACLE_TOL)?;
    let p = m.p();
    let eye = DMatrix::<f64>::identity(p, p);
    let inv = (&eye - &m.b)
        .try_inverse()
        .ok_or(ScmError::SingularCovariance)?;
    for member in members {
        let mm = (&eye - &member.b) * &inv;
        for i in 0..p {
            if mm[(i, i)].abs() <= tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
