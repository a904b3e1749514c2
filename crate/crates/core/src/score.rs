// SPDX-License-Identifier: MIT
//! The penalized multi-environment Gaussian likelihood score: sufficient
//! statistics, per-node maximum likelihood (closed form when the node's noise
//! variance is shared across environments, alternating otherwise), degrees of
//! freedom, full-score assembly, and the local-score cache.
//!
//! The score of a DAG `D` with intervention targets `I` decomposes over
//! nodes. For node `i` with parents `S`, writing
//! `q_e(b) = (e_i - b)' S^e (e_i - b)` for the per-environment quadratic
//! residual under sample covariance `S^e`, the node contributes
//!
//! ```text
//! loglik_i = -(1/2) sum_e n_e [ln 2pi + ln w2_{i,e} + q_e(b)/w2_{i,e}]
//! dof_i    = |S| + max(|E| * 1{i in I}, 1)
//! ```
//!
//! maximized over coefficients `b` supported on `S` and noise variances that
//! are constant across environments unless `i in I`. The full likelihood
//! constants are kept so penalized values are comparable across dof.

use crate::graphs::{Dag, GraphError, TargetSet};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::RwLock;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("environment {0} has fewer than 2 samples")]
    TooFewSamples(usize),
    #[error("no environments provided")]
    NoEnvironments,
    #[error("column counts differ across environments: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance matrix is not symmetric")]
    NotSymmetric,
    #[error("node {node} appears in its own parent set")]
    NodeInParents { node: usize },
    #[error("linear system is singular even after ridge regularization")]
    SingularSystem,
    #[error("penalization parameter must be non-negative, got {0}")]
    NegativeLambda(f64),
}

/// Relative objective-change tolerance for the alternating optimizer. Tight
/// enough that score equivalence holds to the precision the incremental
/// operator deltas are checked at.
pub const MLE_REL_TOL: f64 = 1e-13;

/// Iteration cap for the alternating optimizer; hitting it yields a result
/// flagged `converged = false`, not an error.
pub const MLE_MAX_ITER: usize = 500;

/// Per-environment sample covariances (MLE normalization, data centered per
/// environment) and sample counts: everything the score touches.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    sigmas: Vec<DMatrix<f64>>,
    ns: Vec<usize>,
    p: usize,
}

#[derive(Serialize, Deserialize)]
struct StatsJson {
    sigmas: Vec<Vec<Vec<f64>>>,
    ns: Vec<usize>,
}

impl SufficientStats {
    /// Builds the statistics from per-environment `n_e x p` data matrices:
    /// each environment is centered and `S^e = X'X / n_e`.
    pub fn from_data(data: &[DMatrix<f64>]) -> Result<Self, ScoreError> {
        if data.is_empty() {
            return Err(ScoreError::NoEnvironments);
        }
        let p = data[0].ncols();
        let mut sigmas = Vec::with_capacity(data.len());
        let mut ns = Vec::with_capacity(data.len());
        for (e, x) in data.iter().enumerate() {
            if x.ncols() != p {
                return Err(ScoreError::DimensionMismatch(p, x.ncols()));
            }
            let n = x.nrows();
            if n < 2 {
                return Err(ScoreError::TooFewSamples(e));
            }
            let mut centered = x.clone();
            for j in 0..p {
                let mean = centered.column(j).sum() / n as f64;
                for r in 0..n {
                    centered[(r, j)] -= mean;
                }
            }
            let sigma = centered.transpose() * &centered / n as f64;
            let sigma = (&sigma + sigma.transpose()) * 0.5;
            sigmas.push(sigma);
            ns.push(n);
        }
        Ok(SufficientStats { sigmas, ns, p })
    }

    /// Builds the statistics from precomputed covariances.
    pub fn new(sigmas: Vec<DMatrix<f64>>, ns: Vec<usize>) -> Result<Self, ScoreError> {
        if sigmas.is_empty() || sigmas.len() != ns.len() {
            return Err(ScoreError::NoEnvironments);
        }
        let p = sigmas[0].nrows();
        for (e, s) in sigmas.iter().enumerate() {
            if s.nrows() != p || s.ncols() != p {
                return Err(ScoreError::DimensionMismatch(p, s.ncols()));
            }
            if ns[e] < 2 {
                return Err(ScoreError::TooFewSamples(e));
            }
            for i in 0..p {
                for j in (i + 1)..p {
                    if (s[(i, j)] - s[(j, i)]).abs() > 1e-9 {
                        return Err(ScoreError::NotSymmetric);
                    }
                }
            }
        }
        Ok(SufficientStats { sigmas, ns, p })
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn n_envs(&self) -> usize {
        self.sigmas.len()
    }

    #[inline]
    pub fn sigma(&self, e: usize) -> &DMatrix<f64> {
        &self.sigmas[e]
    }

    #[inline]
    pub fn n(&self, e: usize) -> usize {
        self.ns[e]
    }

    pub fn n_total(&self) -> usize {
        self.ns.iter().sum()
    }

    /// Sample-size-weighted average of the environment covariances.
    pub fn pooled_sigma(&self) -> DMatrix<f64> {
        let n_total = self.n_total() as f64;
        let mut pooled = DMatrix::<f64>::zeros(self.p, self.p);
        for (s, &n) in self.sigmas.iter().zip(&self.ns) {
            pooled += s * (n as f64 / n_total);
        }
        pooled
    }

    /// Lower clamp applied to estimated noise variances so that singular
    /// sample covariances (tiny `n_e`) cannot produce infinite scores.
    pub fn variance_floor(&self) -> f64 {
        let trace: f64 = self.pooled_sigma().trace();
        (1e-10 * trace / self.p as f64).max(1e-300)
    }
}

impl Serialize for SufficientStats {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StatsJson {
            sigmas: self
                .sigmas
                .iter()
                .map(|s| {
                    (0..self.p)
                        .map(|i| (0..self.p).map(|j| s[(i, j)]).collect())
                        .collect()
                })
                .collect(),
            ns: self.ns.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SufficientStats {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = StatsJson::deserialize(deserializer)?;
        let sigmas = raw
            .sigmas
            .into_iter()
            .map(|rows| {
                let p = rows.len();
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            })
            .collect();
        SufficientStats::new(sigmas, raw.ns).map_err(D::Error::custom)
    }
}

/// Canonical key of a node's local score: the node, its sorted parent set,
/// and whether its noise variance may vary across environments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocalKey {
    node: usize,
    parents: Vec<usize>,
    intervened: bool,
}

impl LocalKey {
    pub fn new(
        node: usize,
        parents: impl IntoIterator<Item = usize>,
        intervened: bool,
    ) -> Result<Self, ScoreError> {
        let mut parents: Vec<usize> = parents.into_iter().collect();
        parents.sort_unstable();
        parents.dedup();
        if parents.contains(&node) {
            return Err(ScoreError::NodeInParents { node });
        }
        Ok(LocalKey {
            node,
            parents,
            intervened,
        })
    }

    #[inline]
    pub fn node(&self) -> usize {
        self.node
    }

    #[inline]
    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    #[inline]
    pub fn intervened(&self) -> bool {
        self.intervened
    }
}

/// A scored quantity: log-likelihood in nats, degrees of freedom, and the
/// penalized value `loglik - lambda * dof`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreValue {
    pub loglik: f64,
    pub dof: u32,
    pub penalized: f64,
}

/// Outcome of the per-node maximum likelihood estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    /// Coefficients aligned with the key's sorted parent set.
    pub coefs: Vec<f64>,
    /// Noise variances: one entry per environment when intervened, a single
    /// shared entry otherwise.
    pub omegas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Whether any variance was clamped at the floor.
    pub floor_hit: bool,
}

/// Per-environment pieces of the quadratic `q_e(b)` for one node.
struct NodeSystem {
    /// `S^e_{SS}`
    gram: Vec<DMatrix<f64>>,
    /// `S^e_{S,i}`
    cross: Vec<DVector<f64>>,
    /// `S^e_{ii}`
    sii: Vec<f64>,
    ns: Vec<f64>,
}

impl NodeSystem {
    fn build(key: &LocalKey, stats: &SufficientStats) -> Self {
        let s = key.parents();
        let k = s.len();
        let i = key.node();
        let mut gram = Vec::with_capacity(stats.n_envs());
        let mut cross = Vec::with_capacity(stats.n_envs());
        let mut sii = Vec::with_capacity(stats.n_envs());
        for e in 0..stats.n_envs() {
            let sigma = stats.sigma(e);
            gram.push(DMatrix::from_fn(k, k, |r, c| sigma[(s[r], s[c])]));
            cross.push(DVector::from_fn(k, |r, _| sigma[(s[r], i)]));
            sii.push(sigma[(i, i)]);
        }
        NodeSystem {
            gram,
            cross,
            sii,
            ns: stats.ns.iter().map(|&n| n as f64).collect(),
        }
    }

    fn n_envs(&self) -> usize {
        self.ns.len()
    }

    /// `q_e(b) = S_ii - 2 b'r + b'Gb`, floored at zero against round-off.
    fn residual(&self, e: usize, b: &DVector<f64>) -> f64 {
        let q = self.sii[e] - 2.0 * b.dot(&self.cross[e]) + (&self.gram[e] * b).dot(b);
        q.max(0.0)
    }

    /// Solves `(sum_e w_e G_e) b = sum_e w_e r_e`, adding a ridge of
    /// `1e-12 * trace` once if the system is numerically singular.
    fn solve_weighted(&self, weights: &[f64]) -> Result<DVector<f64>, ScoreError> {
        let k = self.gram[0].nrows();
        if k == 0 {
            return Ok(DVector::zeros(0));
        }
        let mut a = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for ((gram, cross), &w) in self.gram.iter().zip(&self.cross).zip(weights) {
            a += gram * w;
            rhs += cross * w;
        }
        if let Some(chol) = a.clone().cholesky() {
            return Ok(chol.solve(&rhs));
        }
        let ridge = 1e-12 * a.trace() + f64::MIN_POSITIVE;
        for d in 0..k {
            a[(d, d)] += ridge;
        }
        a.cholesky()
            .map(|chol| chol.solve(&rhs))
            .ok_or(ScoreError::SingularSystem)
    }
}

/// Maximum likelihood estimate for a single node.
///
/// When the node's variance is shared across environments (not intervened, or
/// a single environment) the estimate is closed form. Otherwise coefficients
/// and per-environment variances are optimized alternately, starting from the
/// pooled solution.
pub fn local_mle(key: &LocalKey, stats: &SufficientStats) -> Result<MleResult, ScoreError> {
    let sys = NodeSystem::build(key, stats);
    let floor = stats.variance_floor();
    let n_total: f64 = sys.ns.iter().sum();

    // pooled (shared-variance) solution
    let b_pooled = sys.solve_weighted(&sys.ns)?;

    if !key.intervened() || sys.n_envs() == 1 {
        let mut floor_hit = false;
        let pooled_q: f64 = (0..sys.n_envs())
            .map(|e| sys.ns[e] * sys.residual(e, &b_pooled))
            .sum();
        let mut omega = pooled_q / n_total;
        if omega < floor {
            omega = floor;
            floor_hit = true;
        }
        let omegas = if key.intervened() {
            vec![omega; sys.n_envs()]
        } else {
            vec![omega]
        };
        return Ok(MleResult {
            coefs: b_pooled.iter().copied().collect(),
            omegas,
            iterations: 0,
            converged: true,
            floor_hit,
        });
    }

    // intervened with several environments: alternate between coefficients
    // and per-environment variances
    let mut b = b_pooled;
    let mut floor_hit = false;
    let mut omegas: Vec<f64> = (0..sys.n_envs())
        .map(|e| {
            let q = sys.residual(e, &b);
            if q < floor {
                floor_hit = true;
                floor
            } else {
                q
            }
        })
        .collect();
    if key.parents().is_empty() {
        // variance-only case is already exact
        return Ok(MleResult {
            coefs: vec![],
            omegas,
            iterations: 0,
            converged: true,
            floor_hit,
        });
    }

    let objective = |b: &DVector<f64>, omegas: &[f64]| -> f64 {
        (0..sys.n_envs())
            .map(|e| sys.ns[e] * (omegas[e].ln() + sys.residual(e, b) / omegas[e]))
            .sum()
    };

    let mut obj = objective(&b, &omegas);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MLE_MAX_ITER {
        iterations += 1;
        let weights: Vec<f64> = (0..sys.n_envs()).map(|e| sys.ns[e] / omegas[e]).collect();
        b = sys.solve_weighted(&weights)?;
        for (e, omega) in omegas.iter_mut().enumerate() {
            let q = sys.residual(e, &b);
            *omega = if q < floor {
                floor_hit = true;
                floor
            } else {
                q
            };
        }
        let new_obj = objective(&b, &omegas);
        // each block update is an exact minimizer, so the objective descends
        debug_assert!(new_obj <= obj + 1e-9 * obj.abs().max(1.0));
        if (obj - new_obj).abs() <= MLE_REL_TOL * obj.abs().max(1.0) {
            converged = true;
            break;
        }
        obj = new_obj;
    }

    Ok(MleResult {
        coefs: b.iter().copied().collect(),
        omegas,
        iterations,
        converged,
        floor_hit,
    })
}

fn dof_of(key: &LocalKey, n_envs: usize) -> u32 {
    let env_params = if key.intervened() { n_envs } else { 1 };
    (key.parents().len() + env_params.max(1)) as u32
}

/// Log-likelihood contribution of one node at its MLE, with its dof and the
/// penalized value.
pub fn local_score(
    key: &LocalKey,
    stats: &SufficientStats,
    lambda: f64,
) -> Result<ScoreValue, ScoreError> {
    if lambda < 0.0 {
        return Err(ScoreError::NegativeLambda(lambda));
    }
    let (loglik, dof) = local_lik(key, stats)?;
    Ok(ScoreValue {
        loglik,
        dof,
        penalized: loglik - lambda * dof as f64,
    })
}

/// The lambda-independent part of a local score.
fn local_lik(key: &LocalKey, stats: &SufficientStats) -> Result<(f64, u32), ScoreError> {
    let mle = local_mle(key, stats)?;
    let sys = NodeSystem::build(key, stats);
    let b = DVector::from_vec(mle.coefs.clone());
    let ln_2pi = TAU.ln();
    let mut loglik = 0.0;
    for e in 0..sys.n_envs() {
        let omega = if mle.omegas.len() == 1 {
            mle.omegas[0]
        } else {
            mle.omegas[e]
        };
        let q = sys.residual(e, &b);
        loglik += -0.5 * sys.ns[e] * (ln_2pi + omega.ln() + q / omega);
    }
    Ok((loglik, dof_of(key, stats.n_envs())))
}

/// Sum of local scores over all nodes of `d`, with `intervened = (i in I)`.
///
/// The total dof equals `|edges| + p + |I| (|E| - 1)`.
pub fn full_score(
    d: &Dag,
    targets: &TargetSet,
    stats: &SufficientStats,
    lambda: f64,
) -> Result<ScoreValue, ScoreError> {
    full_score_with(d, targets, stats, lambda, None)
}

/// As [`full_score`], reusing and populating `cache`.
pub fn full_score_cached(
    d: &Dag,
    targets: &TargetSet,
    stats: &SufficientStats,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<ScoreValue, ScoreError> {
    full_score_with(d, targets, stats, lambda, Some(cache))
}

fn full_score_with(
    d: &Dag,
    targets: &TargetSet,
    stats: &SufficientStats,
    lambda: f64,
    cache: Option<&ScoreCache>,
) -> Result<ScoreValue, ScoreError> {
    if lambda < 0.0 {
        return Err(ScoreError::NegativeLambda(lambda));
    }
    if d.p() != stats.p() {
        return Err(ScoreError::DimensionMismatch(d.p(), stats.p()));
    }
    let mut loglik = 0.0;
    let mut dof = 0u32;
    for i in 0..d.p() {
        let key = LocalKey::new(i, d.parents(i), targets.contains(i))?;
        let (l, k) = match cache {
            Some(c) => c.lik(&key, stats)?,
            None => local_lik(&key, stats)?,
        };
        loglik += l;
        dof += k;
    }
    Ok(ScoreValue {
        loglik,
        dof,
        penalized: loglik - lambda * dof as f64,
    })
}

/// Cache of lambda-independent local likelihoods, keyed by
/// `(node, parents, intervened)`.
///
/// Values are pure functions of the key and the statistics, so entries never
/// go stale within a fit; [`invalidate_node`](Self::invalidate_node) exists
/// for the outer search's target toggles, which change only one node's keys.
/// Reads are concurrent; inserts are synchronized and idempotent.
#[derive(Debug, Default)]
pub struct ScoreCache {
    map: RwLock<HashMap<LocalKey, (f64, u32)>>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &LocalKey) -> Option<(f64, u32)> {
        self.map.read().expect("cache lock").get(key).copied()
    }

    pub fn put(&self, key: LocalKey, loglik: f64, dof: u32) {
        self.map
            .write()
            .expect("cache lock")
            .insert(key, (loglik, dof));
    }

    /// Drops every entry of `node`, regardless of parent set or flag.
    pub fn invalidate_node(&self, node: usize) {
        self.map
            .write()
            .expect("cache lock")
            .retain(|k, _| k.node() != node);
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lik(&self, key: &LocalKey, stats: &SufficientStats) -> Result<(f64, u32), ScoreError> {
        if let Some(hit) = self.get(key) {
            return Ok(hit);
        }
        let computed = local_lik(key, stats)?;
        self.put(key.clone(), computed.0, computed.1);
        Ok(computed)
    }
}

/// Cached local score; computes and stores the likelihood on a miss.
pub fn local_score_cached(
    key: &LocalKey,
    stats: &SufficientStats,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<ScoreValue, ScoreError> {
    if lambda < 0.0 {
        return Err(ScoreError::NegativeLambda(lambda));
    }
    let (loglik, dof) = cache.lik(key, stats)?;
    Ok(ScoreValue {
        loglik,
        dof,
        penalized: loglik - lambda * dof as f64,
    })
}

/// BIC-scale penalization: `lambda = (1/2) ln N`.
pub fn bic_lambda(stats: &SufficientStats) -> f64 {
    0.5 * (stats.n_total() as f64).ln()
}
