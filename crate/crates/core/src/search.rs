// SPDX-License-Identifier: MIT
//! Greedy search over equivalence classes: the GES-style inner procedure
//! (insert, delete, and turn operators with class completion after every
//! step) and the outer procedures that search the space of intervention-
//! target sets, either greedily or by the noise-variance ranking.
//!
//! The inner procedure runs its three phases to their fixpoints and repeats
//! the cycle until none improves. The turning phase reverses one edge at a
//! time; it matters because the completion pins the orientation of every
//! edge incident to an intervention target, so a direction chosen early
//! could otherwise never be revised without deleting the edge outright.
//!
//! With an empty target set and pooled statistics the inner procedure is
//! plain GES (with turning).

use crate::graphs::{dag_to_icpdag, gnies_completion, pdag_to_dag, GraphError, Pdag, TargetSet};
use crate::score::{
    full_score_cached, local_mle, local_score_cached, LocalKey, ScoreCache, ScoreError, ScoreValue,
    SufficientStats,
};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("operator is not valid for the current class: {0}")]
    InvalidOperator(&'static str),
    #[error("search exceeded the iteration cap of {0} operator applications")]
    IterationCap(usize),
    #[error("internal invariant violated: {0}")]
    Internal(&'static str),
}

/// Strict-improvement threshold: a step is accepted only when its score gain
/// exceeds this, so floating-point ties cannot loop.
#[inline]
fn improvement_eps(score: f64) -> f64 {
    1e-9 * score.abs().max(1.0)
}

/// Undirected neighbors of `y` that are adjacent to `x`.
#[inline]
fn na_mask(c: &Pdag, y: usize, x: usize) -> u64 {
    c.undirected_mask(y) & c.adjacency_mask(x)
}

fn mask_to_vec(mask: u64) -> Vec<usize> {
    (0..64).filter(|&i| mask & (1u64 << i) != 0).collect()
}

fn vec_to_mask(v: &[usize]) -> u64 {
    v.iter().fold(0u64, |m, &i| m | (1u64 << i))
}

/// Every pair of nodes in `mask` is adjacent in `c`.
fn is_clique(c: &Pdag, mask: u64) -> bool {
    let nodes = mask_to_vec(mask);
    for (a, &i) in nodes.iter().enumerate() {
        for &j in nodes.iter().skip(a + 1) {
            if !c.adjacent(i, j) {
                return false;
            }
        }
    }
    true
}

/// True iff some semi-directed path from `from` to `to` avoids `blocked`.
/// A semi-directed path follows directed edges forward and undirected edges
/// in either direction.
fn semi_directed_path_avoiding(c: &Pdag, from: usize, to: usize, blocked: u64) -> bool {
    let mut seen = 1u64 << from;
    let mut frontier = vec![from];
    while let Some(u) = frontier.pop() {
        let next = (c.children_mask(u) | c.undirected_mask(u)) & !seen & !blocked;
        if next & (1u64 << to) != 0 {
            return true;
        }
        for v in mask_to_vec(next) {
            seen |= 1u64 << v;
            frontier.push(v);
        }
    }
    false
}

/// Insert operator: adds `x -> y` and orients `t -> y` for every `t` in `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertOp {
    pub x: usize,
    pub y: usize,
    /// Sorted subset of the undirected neighbors of `y` not adjacent to `x`.
    pub t: Vec<usize>,
}

impl fmt::Display for InsertOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "insert {}->{} T={:?}", self.x, self.y, self.t)
    }
}

/// Delete operator: removes the edge between `x` and `y` (directed `x -> y`
/// or undirected) and orients `y -> h`, and undirected `x - h`, as `x -> h`
/// for every `h` in `H`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteOp {
    pub x: usize,
    pub y: usize,
    /// Sorted subset of the undirected neighbors of `y` adjacent to `x`.
    pub h: Vec<usize>,
}

impl fmt::Display for DeleteOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "delete {}~{} H={:?}", self.x, self.y, self.h)
    }
}

/// Sorted subsets of `base`, in lexicographic order of their sorted element
/// lists.
fn subsets_lexicographic(base: u64) -> Vec<Vec<usize>> {
    let elems = mask_to_vec(base);
    let mut out: Vec<Vec<usize>> = (0u64..(1 << elems.len()))
        .map(|m| {
            elems
                .iter()
                .enumerate()
                .filter(|(k, _)| m & (1 << k) != 0)
                .map(|(_, &v)| v)
                .collect()
        })
        .collect();
    out.sort();
    out
}

/// All valid insert operators for the class represented by `c`, in
/// lexicographic `(x, y, T)` order.
///
/// `Insert(x, y, T)` is valid iff `NA(y, x) | T` is a clique and every
/// semi-directed path from `y` to `x` intersects `NA(y, x) | T`.
pub fn valid_inserts(c: &Pdag) -> Vec<InsertOp> {
    let p = c.p();
    let mut out = Vec::new();
    for x in 0..p {
        for y in 0..p {
            if x == y || c.adjacent(x, y) {
                continue;
            }
            let na = na_mask(c, y, x);
            if !is_clique(c, na) {
                // every NA | T contains NA, so no T can repair this
                continue;
            }
            let t0 = c.undirected_mask(y) & !c.adjacency_mask(x) & !(1u64 << x);
            for t in subsets_lexicographic(t0) {
                let block = na | vec_to_mask(&t);
                if !is_clique(c, block) {
                    continue;
                }
                if semi_directed_path_avoiding(c, y, x, block) {
                    continue;
                }
                out.push(InsertOp { x, y, t });
            }
        }
    }
    out
}

/// All valid delete operators for the class represented by `c`, in
/// lexicographic `(x, y, H)` order.
///
/// `Delete(x, y, H)` applies to `x -> y` or `x - y` and is valid iff
/// `NA(y, x) \ H` is a clique.
pub fn valid_deletes(c: &Pdag) -> Vec<DeleteOp> {
    let p = c.p();
    let mut out = Vec::new();
    for x in 0..p {
        for y in 0..p {
            if x == y || !(c.has_directed(x, y) || c.has_undirected(x, y)) {
                continue;
            }
            let na = na_mask(c, y, x);
            for h in subsets_lexicographic(na) {
                if is_clique(c, na & !vec_to_mask(&h)) {
                    out.push(DeleteOp { x, y, h });
                }
            }
        }
    }
    out
}

fn check_insert_valid(c: &Pdag, op: &InsertOp) -> Result<(), SearchError> {
    if op.x == op.y || c.adjacent(op.x, op.y) {
        return Err(SearchError::InvalidOperator(
            "insert endpoints must be distinct and non-adjacent",
        ));
    }
    let t = vec_to_mask(&op.t);
    if t & !(c.undirected_mask(op.y) & !c.adjacency_mask(op.x)) != 0 {
        return Err(SearchError::InvalidOperator(
            "T must be undirected neighbors of y not adjacent to x",
        ));
    }
    let block = na_mask(c, op.y, op.x) | t;
    if !is_clique(c, block) {
        return Err(SearchError::InvalidOperator("NA(y,x) | T is not a clique"));
    }
    if semi_directed_path_avoiding(c, op.y, op.x, block) {
        return Err(SearchError::InvalidOperator(
            "a semi-directed path from y to x avoids NA(y,x) | T",
        ));
    }
    Ok(())
}

fn check_delete_valid(c: &Pdag, op: &DeleteOp) -> Result<(), SearchError> {
    if op.x == op.y || !(c.has_directed(op.x, op.y) || c.has_undirected(op.x, op.y)) {
        return Err(SearchError::InvalidOperator(
            "delete requires x -> y or x - y",
        ));
    }
    let na = na_mask(c, op.y, op.x);
    let h = vec_to_mask(&op.h);
    if h & !na != 0 {
        return Err(SearchError::InvalidOperator(
            "H must be undirected neighbors of y adjacent to x",
        ));
    }
    if !is_clique(c, na & !h) {
        return Err(SearchError::InvalidOperator("NA(y,x) \\ H is not a clique"));
    }
    Ok(())
}

/// Applies a valid insert, returning the uncompleted PDAG.
pub fn apply_insert(c: &Pdag, op: &InsertOp) -> Result<Pdag, SearchError> {
    check_insert_valid(c, op)?;
    let mut g = c.clone();
    g.add_directed(op.x, op.y);
    for &t in &op.t {
        g.orient(t, op.y);
    }
    Ok(g)
}

/// Applies a valid delete, returning the uncompleted PDAG.
pub fn apply_delete(c: &Pdag, op: &DeleteOp) -> Result<Pdag, SearchError> {
    check_delete_valid(c, op)?;
    let mut g = c.clone();
    g.remove_between(op.x, op.y);
    for &h in &op.h {
        g.orient(op.y, h);
        if g.has_undirected(op.x, h) {
            g.orient(op.x, h);
        }
    }
    Ok(g)
}

/// Score change from applying an insert: only `y`'s local score moves, from
/// parent context `PA(y) | NA(y,x) | T` to the same context plus `x`.
pub fn insert_score_delta(
    op: &InsertOp,
    c: &Pdag,
    targets: &TargetSet,
    stats: &SufficientStats,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<f64, ScoreError> {
    let base = c.parents_mask(op.y) | na_mask(c, op.y, op.x) | vec_to_mask(&op.t);
    let intervened = targets.contains(op.y);
    let old_key = LocalKey::new(op.y, mask_to_vec(base), intervened)?;
    let new_key = LocalKey::new(op.y, mask_to_vec(base | (1u64 << op.x)), intervened)?;
    let old = local_score_cached(&old_key, stats, lambda, cache)?;
    let new = local_score_cached(&new_key, stats, lambda, cache)?;
    Ok(new.penalized - old.penalized)
}

/// Score change from applying a delete: `y`'s parent context shrinks from
/// `(NA(y,x) \ H) | PA(y) | {x}` to the same context minus `x`.
pub fn delete_score_delta(
    op: &DeleteOp,
    c: &Pdag,
    targets: &TargetSet,
    stats: &SufficientStats,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<f64, ScoreError> {
    let base = (na_mask(c, op.y, op.x) & !vec_to_mask(&op.h)) | c.parents_mask(op.y);
    let intervened = targets.contains(op.y);
    let old_key = LocalKey::new(op.y, mask_to_vec(base | (1u64 << op.x)), intervened)?;
    let new_key = LocalKey::new(op.y, mask_to_vec(base & !(1u64 << op.x)), intervened)?;
    let old = local_score_cached(&old_key, stats, lambda, cache)?;
    let new = local_score_cached(&new_key, stats, lambda, cache)?;
    Ok(new.penalized - old.penalized)
}

/// Turn operator: reverses `y -> x` (or orients `x - y`) into `x -> y`,
/// additionally orienting `c -> y` for every `c` in `C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOp {
    pub x: usize,
    pub y: usize,
    /// Sorted subset of the undirected neighbors of `y` (excluding `x`).
    pub c: Vec<usize>,
}

impl fmt::Display for TurnOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "turn {}->{} C={:?}", self.x, self.y, self.c)
    }
}

/// Applies a turn, returning the uncompleted PDAG. The edge between `x` and
/// `y` must be `y -> x` or undirected.
pub fn apply_turn(c: &Pdag, op: &TurnOp) -> Result<Pdag, SearchError> {
    if op.x == op.y || !(c.has_directed(op.y, op.x) || c.has_undirected(op.x, op.y)) {
        return Err(SearchError::InvalidOperator(
            "turn requires y -> x or x - y",
        ));
    }
    let c_mask = vec_to_mask(&op.c);
    if c_mask & !(c.undirected_mask(op.y) & !(1u64 << op.x)) != 0 {
        return Err(SearchError::InvalidOperator(
            "C must be undirected neighbors of y other than x",
        ));
    }
    let mut g = c.clone();
    g.remove_between(op.x, op.y);
    g.add_directed(op.x, op.y);
    for &v in &op.c {
        g.orient(v, op.y);
    }
    Ok(g)
}

/// Candidate turns whose application completes to a class different from the
/// current one, in lexicographic `(x, y, C)` order. Validity is established
/// constructively: a turn is kept iff the completion succeeds.
pub fn valid_turns(c: &Pdag, targets: &TargetSet) -> Vec<TurnOp> {
    scored_turns(c, targets)
        .into_iter()
        .map(|(op, _)| op)
        .collect()
}

fn scored_turns(c: &Pdag, targets: &TargetSet) -> Vec<(TurnOp, Pdag)> {
    let p = c.p();
    let mut out = Vec::new();
    for x in 0..p {
        for y in 0..p {
            if x == y || !(c.has_directed(y, x) || c.has_undirected(x, y)) {
                continue;
            }
            let c0 = c.undirected_mask(y) & !(1u64 << x);
            for sub in subsets_lexicographic(c0) {
                let op = TurnOp { x, y, c: sub };
                let Ok(applied) = apply_turn(c, &op) else {
                    continue;
                };
                let Ok(completed) = gnies_completion(&applied, targets) else {
                    continue;
                };
                if completed != *c {
                    out.push((op, completed));
                }
            }
        }
    }
    out
}

/// Score change from a turn, computed as the exact difference of completed
/// class scores (evaluated on consistent extensions through the cache).
pub fn turn_score_delta(
    op: &TurnOp,
    c: &Pdag,
    targets: &TargetSet,
    stats: &SufficientStats,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<f64, SearchError> {
    let completed = gnies_completion(&apply_turn(c, op)?, targets)?;
    let base = full_score_cached(&pdag_to_dag(c)?, targets, stats, lambda, cache)?;
    let after = full_score_cached(&pdag_to_dag(&completed)?, targets, stats, lambda, cache)?;
    Ok(after.penalized - base.penalized)
}

/// One recorded search step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub phase: String,
    pub detail: String,
    pub delta: f64,
    pub score: f64,
}

/// How a fit is run; all variants return a [`SearchResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// Outer greedy addition/removal of intervention targets.
    Greedy,
    /// Ranking-based outer procedure (one inner run with all targets, then a
    /// single pass over the ranked targets).
    Rank,
    /// Inner procedure only, at exactly the given targets.
    Inner,
    /// Plain GES on the statistics pooled across environments.
    PooledGes,
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FitMethod::Greedy => "greedy",
            FitMethod::Rank => "rank",
            FitMethod::Inner => "inner",
            FitMethod::PooledGes => "pooled-ges",
        };
        f.write_str(s)
    }
}

/// Knobs for the outer procedures.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Targets known in advance; they are kept in the estimate at every step.
    pub known_targets: TargetSet,
    /// Cap on the number of targets the outer search may hold (default `p`).
    pub max_targets: Option<usize>,
    /// Ranking direction: add the most variable noise estimates first.
    pub rank_most_variable_first: bool,
    /// Disable the local-score cache (results must not change).
    pub use_cache: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            known_targets: TargetSet::empty(),
            max_targets: None,
            rank_most_variable_first: true,
            use_cache: true,
        }
    }
}

/// Outcome of a fit: the estimated I-CPDAG, the targets, the score, and the
/// applied steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub icpdag: Pdag,
    pub targets: TargetSet,
    pub score: ScoreValue,
    pub lambda: f64,
    pub method: FitMethod,
    pub trace: Vec<TraceStep>,
    /// Number of inner-procedure runs the fit consumed.
    pub inner_runs: usize,
}

#[derive(Serialize, Deserialize)]
struct ResultJson {
    icpdag: Pdag,
    targets: TargetSet,
    score: f64,
    loglik: f64,
    dof: u32,
    lambda: f64,
    method: FitMethod,
    inner_runs: usize,
    trace: Vec<TraceStep>,
}

impl Serialize for SearchResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ResultJson {
            icpdag: self.icpdag.clone(),
            targets: self.targets,
            score: self.score.penalized,
            loglik: self.score.loglik,
            dof: self.score.dof,
            lambda: self.lambda,
            method: self.method,
            inner_runs: self.inner_runs,
            trace: self.trace.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SearchResult {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = ResultJson::deserialize(deserializer)?;
        Ok(SearchResult {
            icpdag: raw.icpdag,
            targets: raw.targets,
            score: ScoreValue {
                loglik: raw.loglik,
                dof: raw.dof,
                penalized: raw.score,
            },
            lambda: raw.lambda,
            method: raw.method,
            trace: raw.trace,
            inner_runs: raw.inner_runs,
        })
    }
}

/// Single-environment statistics pooled across environments:
/// `S = sum_e n_e S^e / N` with `n = N`.
pub fn pool_stats(stats: &SufficientStats) -> SufficientStats {
    SufficientStats::new(vec![stats.pooled_sigma()], vec![stats.n_total()])
        .expect("pooled statistics are well-formed")
}

/// Inner procedure at a fixed target set, starting from the empty class.
pub fn inner_fit(
    stats: &SufficientStats,
    targets: &TargetSet,
    lambda: f64,
) -> Result<SearchResult, SearchError> {
    let cache = ScoreCache::new();
    inner_fit_impl(stats, targets, lambda, None, &cache)
}

/// Inner procedure sharing an external local-score cache.
pub fn inner_fit_cached(
    stats: &SufficientStats,
    targets: &TargetSet,
    lambda: f64,
    cache: &ScoreCache,
) -> Result<SearchResult, SearchError> {
    inner_fit_impl(stats, targets, lambda, None, cache)
}

/// Inner procedure starting from an explicit class representation.
pub fn inner_fit_from(
    stats: &SufficientStats,
    targets: &TargetSet,
    lambda: f64,
    start: &Pdag,
    cache: &ScoreCache,
) -> Result<SearchResult, SearchError> {
    inner_fit_impl(stats, targets, lambda, Some(start), cache)
}

struct InnerState<'a> {
    c: Pdag,
    running: f64,
    applied: usize,
    cap: usize,
    trace: Vec<TraceStep>,
    targets: &'a TargetSet,
    stats: &'a SufficientStats,
    lambda: f64,
    cache: &'a ScoreCache,
}

impl InnerState<'_> {
    fn accept(
        &mut self,
        phase: &str,
        detail: String,
        delta: f64,
        completed: Pdag,
    ) -> Result<(), SearchError> {
        self.c = completed;
        self.running += delta;
        self.applied += 1;
        self.trace.push(TraceStep {
            phase: phase.into(),
            detail,
            delta,
            score: self.running,
        });
        if self.applied > self.cap {
            return Err(SearchError::IterationCap(self.cap));
        }
        Ok(())
    }

    /// Applies the best strictly improving insert until none exists. Returns
    /// whether any operator was applied.
    fn forward_phase(&mut self) -> Result<bool, SearchError> {
        let mut any = false;
        loop {
            let ops = valid_inserts(&self.c);
            let mut best: Option<(f64, usize)> = None;
            for (k, op) in ops.iter().enumerate() {
                let delta = insert_score_delta(
                    op,
                    &self.c,
                    self.targets,
                    self.stats,
                    self.lambda,
                    self.cache,
                )?;
                if best.is_none_or(|(bd, _)| delta > bd) {
                    best = Some((delta, k));
                }
            }
            let Some((delta, k)) = best else { break };
            if delta <= improvement_eps(self.running) {
                break;
            }
            let op = &ops[k];
            let completed = gnies_completion(&apply_insert(&self.c, op)?, self.targets)?;
            self.accept("forward", op.to_string(), delta, completed)?;
            any = true;
        }
        Ok(any)
    }

    fn backward_phase(&mut self) -> Result<bool, SearchError> {
        let mut any = false;
        loop {
            let ops = valid_deletes(&self.c);
            let mut best: Option<(f64, usize)> = None;
            for (k, op) in ops.iter().enumerate() {
                let delta = delete_score_delta(
                    op,
                    &self.c,
                    self.targets,
                    self.stats,
                    self.lambda,
                    self.cache,
                )?;
                if best.is_none_or(|(bd, _)| delta > bd) {
                    best = Some((delta, k));
                }
            }
            let Some((delta, k)) = best else { break };
            if delta <= improvement_eps(self.running) {
                break;
            }
            let op = &ops[k];
            let completed = gnies_completion(&apply_delete(&self.c, op)?, self.targets)?;
            self.accept("backward", op.to_string(), delta, completed)?;
            any = true;
        }
        Ok(any)
    }

    /// Applies the best strictly improving turn until none exists. Deltas are
    /// exact completed-class score differences.
    fn turning_phase(&mut self) -> Result<bool, SearchError> {
        let mut any = false;
        loop {
            let base = full_score_cached(
                &pdag_to_dag(&self.c)?,
                self.targets,
                self.stats,
                self.lambda,
                self.cache,
            )?;
            let mut best: Option<(f64, TurnOp, Pdag)> = None;
            for (op, completed) in scored_turns(&self.c, self.targets) {
                let after = full_score_cached(
                    &pdag_to_dag(&completed)?,
                    self.targets,
                    self.stats,
                    self.lambda,
                    self.cache,
                )?;
                let delta = after.penalized - base.penalized;
                if best.as_ref().is_none_or(|(bd, _, _)| delta > *bd) {
                    best = Some((delta, op, completed));
                }
            }
            let Some((delta, op, completed)) = best else {
                break;
            };
            if delta <= improvement_eps(self.running) {
                break;
            }
            self.accept("turning", op.to_string(), delta, completed)?;
            any = true;
        }
        Ok(any)
    }
}

fn inner_fit_impl(
    stats: &SufficientStats,
    targets: &TargetSet,
    lambda: f64,
    start: Option<&Pdag>,
    cache: &ScoreCache,
) -> Result<SearchResult, SearchError> {
    let p = stats.p();
    let c = match start {
        Some(g) => gnies_completion(g, targets)?,
        None => Pdag::empty(p)?,
    };
    let ext = pdag_to_dag(&c)?;
    let start_score = full_score_cached(&ext, targets, stats, lambda, cache)?;
    let mut state = InnerState {
        c,
        running: start_score.penalized,
        applied: 0,
        cap: 10 * p * p,
        trace: Vec::new(),
        targets,
        stats,
        lambda,
        cache,
    };

    // cycle through the phases until a full pass leaves the class unchanged
    loop {
        let mut improved = state.forward_phase()?;
        improved |= state.backward_phase()?;
        improved |= state.turning_phase()?;
        if !improved {
            break;
        }
    }
    let InnerState { c, trace, .. } = state;

    let ext = pdag_to_dag(&c)?;
    let score = full_score_cached(&ext, targets, stats, lambda, cache)?;
    if dag_to_icpdag(&ext, targets) != c {
        return Err(SearchError::Internal(
            "search state is not a canonical class representation",
        ));
    }
    Ok(SearchResult {
        icpdag: c,
        targets: *targets,
        score,
        lambda,
        method: FitMethod::Inner,
        trace,
        inner_runs: 1,
    })
}

/// Full fit: estimates the intervention targets (unless the method fixes
/// them) and returns the highest-scoring class found.
pub fn gnies_fit(
    stats: &SufficientStats,
    lambda: f64,
    method: FitMethod,
    opts: &FitOptions,
) -> Result<SearchResult, SearchError> {
    gnies_fit_cached(stats, lambda, method, opts, &ScoreCache::new())
}

/// As [`gnies_fit`], sharing an external local-score cache. Cached values are
/// independent of `lambda`, so one cache may serve a whole regularization
/// path.
pub fn gnies_fit_cached(
    stats: &SufficientStats,
    lambda: f64,
    method: FitMethod,
    opts: &FitOptions,
    cache: &ScoreCache,
) -> Result<SearchResult, SearchError> {
    match method {
        FitMethod::Inner => {
            let mut res = run_inner(stats, &opts.known_targets, lambda, cache, opts)?;
            res.method = FitMethod::Inner;
            Ok(res)
        }
        FitMethod::PooledGes => {
            // the pooled statistics need their own cache keyspace
            let pooled = pool_stats(stats);
            let mut res = run_inner(
                &pooled,
                &TargetSet::empty(),
                lambda,
                &ScoreCache::new(),
                opts,
            )?;
            res.method = FitMethod::PooledGes;
            Ok(res)
        }
        FitMethod::Greedy | FitMethod::Rank => {
            if stats.n_envs() == 1 {
                // with one environment no variance can differ across
                // environments, the score is constant in the target set, and
                // ties resolve to no addition: the estimate is the known set
                let mut res = run_inner(stats, &opts.known_targets, lambda, cache, opts)?;
                res.method = method;
                return Ok(res);
            }
            match method {
                FitMethod::Greedy => greedy_outer(stats, lambda, opts, cache),
                _ => rank_outer(stats, lambda, opts, cache),
            }
        }
    }
}

fn run_inner(
    stats: &SufficientStats,
    targets: &TargetSet,
    lambda: f64,
    cache: &ScoreCache,
    opts: &FitOptions,
) -> Result<SearchResult, SearchError> {
    if opts.use_cache {
        inner_fit_cached(stats, targets, lambda, cache)
    } else {
        inner_fit(stats, targets, lambda)
    }
}

fn greedy_outer(
    stats: &SufficientStats,
    lambda: f64,
    opts: &FitOptions,
    cache: &ScoreCache,
) -> Result<SearchResult, SearchError> {
    let p = stats.p();
    let max_targets = opts.max_targets.unwrap_or(p).min(p);
    let mut inner_runs = 0usize;
    let mut outer_trace = Vec::new();

    let mut current = opts.known_targets;
    let mut current_res = run_inner(stats, &current, lambda, cache, opts)?;
    inner_runs += 1;

    // greedy addition
    loop {
        if current.len() >= max_targets {
            break;
        }
        let mut best: Option<(usize, SearchResult)> = None;
        for j in 0..p {
            if current.contains(j) {
                continue;
            }
            let cand = current.with(j);
            let res = run_inner(stats, &cand, lambda, cache, opts)?;
            inner_runs += 1;
            if best
                .as_ref()
                .is_none_or(|(_, b)| res.score.penalized > b.score.penalized)
            {
                best = Some((j, res));
            }
        }
        let Some((j, res)) = best else { break };
        if res.score.penalized
            <= current_res.score.penalized + improvement_eps(current_res.score.penalized)
        {
            break;
        }
        current = current.with(j);
        cache.invalidate_node(j);
        outer_trace.push(TraceStep {
            phase: "add-target".into(),
            detail: format!("target {j}"),
            delta: res.score.penalized - current_res.score.penalized,
            score: res.score.penalized,
        });
        current_res = res;
    }

    // greedy deletion, never dropping known targets
    loop {
        let mut best: Option<(usize, SearchResult)> = None;
        for j in current.iter() {
            if opts.known_targets.contains(j) {
                continue;
            }
            let cand = current.without(j);
            let res = run_inner(stats, &cand, lambda, cache, opts)?;
            inner_runs += 1;
            if best
                .as_ref()
                .is_none_or(|(_, b)| res.score.penalized > b.score.penalized)
            {
                best = Some((j, res));
            }
        }
        let Some((j, res)) = best else { break };
        if res.score.penalized
            <= current_res.score.penalized + improvement_eps(current_res.score.penalized)
        {
            break;
        }
        current = current.without(j);
        cache.invalidate_node(j);
        outer_trace.push(TraceStep {
            phase: "remove-target".into(),
            detail: format!("target {j}"),
            delta: res.score.penalized - current_res.score.penalized,
            score: res.score.penalized,
        });
        current_res = res;
    }

    // final inner run at the estimated targets
    let mut result = run_inner(stats, &current, lambda, cache, opts)?;
    inner_runs += 1;
    result.method = FitMethod::Greedy;
    result.inner_runs = inner_runs;
    outer_trace.extend(result.trace);
    result.trace = outer_trace;
    Ok(result)
}

/// Per-node ranking statistic: the population variance (uniform environment
/// weighting) of the noise-variance estimates from a fit with interventions
/// on all variables.
fn ranking_statistics(
    stats: &SufficientStats,
    full_result: &SearchResult,
) -> Result<Vec<f64>, SearchError> {
    let ext = pdag_to_dag(&full_result.icpdag)?;
    let n_envs = stats.n_envs() as f64;
    let mut out = Vec::with_capacity(stats.p());
    for i in 0..stats.p() {
        let key = LocalKey::new(i, ext.parents(i), true)?;
        let mle = local_mle(&key, stats)?;
        let mean: f64 = mle.omegas.iter().sum::<f64>() / n_envs;
        let var: f64 = mle
            .omegas
            .iter()
            .map(|w| (w - mean) * (w - mean))
            .sum::<f64>()
            / n_envs;
        out.push(var);
    }
    Ok(out)
}

fn rank_outer(
    stats: &SufficientStats,
    lambda: f64,
    opts: &FitOptions,
    cache: &ScoreCache,
) -> Result<SearchResult, SearchError> {
    let p = stats.p();
    let max_targets = opts.max_targets.unwrap_or(p).min(p);
    let mut inner_runs = 0usize;
    let mut outer_trace = Vec::new();

    let full = TargetSet::full(p)?;
    let full_res = run_inner(stats, &full, lambda, cache, opts)?;
    inner_runs += 1;

    let stat = ranking_statistics(stats, &full_res)?;
    let mut order: Vec<usize> = (0..p).collect();
    if opts.rank_most_variable_first {
        order.sort_by(|&a, &b| stat[b].partial_cmp(&stat[a]).unwrap().then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| stat[a].partial_cmp(&stat[b]).unwrap().then(a.cmp(&b)));
    }
    outer_trace.push(TraceStep {
        phase: "rank-order".into(),
        detail: format!("{order:?}"),
        delta: 0.0,
        score: full_res.score.penalized,
    });

    // walk the prefix chain upward while the score improves; scores along the
    // chain are remembered so the downward pass needs no further inner runs
    let mut chain: Vec<(TargetSet, SearchResult)> = Vec::new();
    let mut current = opts.known_targets;
    let mut current_res = if current == full {
        full_res.clone()
    } else {
        inner_runs += 1;
        run_inner(stats, &current, lambda, cache, opts)?
    };
    for &j in &order {
        if current.contains(j) || current.len() >= max_targets {
            continue;
        }
        let cand = current.with(j);
        let cand_res = if cand == full {
            full_res.clone()
        } else {
            inner_runs += 1;
            run_inner(stats, &cand, lambda, cache, opts)?
        };
        if cand_res.score.penalized
            <= current_res.score.penalized + improvement_eps(current_res.score.penalized)
        {
            break;
        }
        outer_trace.push(TraceStep {
            phase: "add-target".into(),
            detail: format!("target {j}"),
            delta: cand_res.score.penalized - current_res.score.penalized,
            score: cand_res.score.penalized,
        });
        chain.push((current, current_res));
        current = cand;
        current_res = cand_res;
    }

    // downward pass over the memoized chain while the score improves
    while let Some((prev, prev_res)) = chain.last() {
        if prev_res.score.penalized
            <= current_res.score.penalized + improvement_eps(current_res.score.penalized)
        {
            break;
        }
        outer_trace.push(TraceStep {
            phase: "remove-target".into(),
            detail: format!("targets {:?}", prev.to_vec()),
            delta: prev_res.score.penalized - current_res.score.penalized,
            score: prev_res.score.penalized,
        });
        current = *prev;
        current_res = prev_res.clone();
        chain.pop();
    }
    let _ = current;

    let mut result = current_res;
    result.method = FitMethod::Rank;
    result.inner_runs = inner_runs;
    outer_trace.extend(result.trace);
    result.trace = outer_trace;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{dag_to_cpdag, Dag};
    use crate::scm::{random_scm, GenParams, InterventionKind};
    use crate::score::{bic_lambda, full_score};

    fn protocol_stats(
        p: usize,
        n_envs: usize,
        n: usize,
        seed: u64,
    ) -> (SufficientStats, crate::scm::RandomScm) {
        let gp = GenParams {
            p,
            avg_degree: 2.0,
            weight_range: (0.5, 1.0),
            variance_range: (1.0, 2.0),
            intervention_variance_range: (5.0, 10.0),
            n_envs,
            intervention_kind: InterventionKind::Noise,
            seed,
        };
        let r = random_scm(&gp).unwrap();
        let data: Vec<_> = (0..n_envs)
            .map(|e| r.model.sample(e, n, seed ^ 0xabcd).unwrap())
            .collect();
        (SufficientStats::from_data(&data).unwrap(), r)
    }

    #[test]
    fn inserts_on_empty_cpdag() {
        let c = Pdag::empty(3).unwrap();
        let ops = valid_inserts(&c);
        assert_eq!(ops.len(), 6);
        assert!(ops.iter().all(|op| op.t.is_empty()));
    }

    #[test]
    fn deletes_on_complete_undirected_pair() {
        let c = Pdag::new(2, &[], &[(0, 1)]).unwrap();
        let ops = valid_deletes(&c);
        assert_eq!(
            ops,
            vec![
                DeleteOp {
                    x: 0,
                    y: 1,
                    h: vec![]
                },
                DeleteOp {
                    x: 1,
                    y: 0,
                    h: vec![]
                },
            ]
        );
    }

    #[test]
    fn insert_on_chain_cpdag() {
        // 0 - 1 - 2: NA(2, 0) = {1}, no eligible T (1 is adjacent to 0)
        let c = Pdag::new(3, &[], &[(0, 1), (1, 2)]).unwrap();
        let ops = valid_inserts(&c);
        let into_2: Vec<&InsertOp> = ops.iter().filter(|op| op.x == 0 && op.y == 2).collect();
        assert_eq!(into_2.len(), 1);
        assert!(into_2[0].t.is_empty());
    }

    #[test]
    fn apply_insert_and_delete_basics() {
        let c = Pdag::empty(2).unwrap();
        let op = InsertOp {
            x: 0,
            y: 1,
            t: vec![],
        };
        let g = apply_insert(&c, &op).unwrap();
        assert!(g.has_directed(0, 1));

        let c = Pdag::new(2, &[], &[(0, 1)]).unwrap();
        let del = DeleteOp {
            x: 0,
            y: 1,
            h: vec![],
        };
        let g = apply_delete(&c, &del).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn invalid_operators_are_rejected() {
        let c = Pdag::new(2, &[(0, 1)], &[]).unwrap();
        let op = InsertOp {
            x: 0,
            y: 1,
            t: vec![],
        };
        assert!(apply_insert(&c, &op).is_err());
        let del = DeleteOp {
            x: 1,
            y: 0,
            h: vec![],
        };
        assert!(apply_delete(&c, &del).is_err());
    }

    #[test]
    fn completion_after_apply_is_extendable() {
        // every valid operator applied across a spread of search states must
        // leave an extendable PDAG
        let mut applications = 0;
        for seed in 0..20 {
            let (stats, truth) = protocol_stats(6, 3, 200, 40 + seed);
            let lambda = bic_lambda(&stats);
            for targets in [TargetSet::empty(), truth.targets] {
                let res = inner_fit(&stats, &targets, lambda).unwrap();
                let c = res.icpdag;
                for op in valid_inserts(&c) {
                    let g = apply_insert(&c, &op).unwrap();
                    gnies_completion(&g, &targets).unwrap();
                    applications += 1;
                }
                for op in valid_deletes(&c) {
                    let g = apply_delete(&c, &op).unwrap();
                    gnies_completion(&g, &targets).unwrap();
                    applications += 1;
                }
            }
        }
        assert!(
            applications > 1000,
            "only {applications} operator applications"
        );
    }

    #[test]
    fn deltas_match_full_score_differences() {
        let (stats, _) = protocol_stats(5, 3, 150, 7);
        let lambda = bic_lambda(&stats);
        for targets in [TargetSet::empty(), TargetSet::new([0, 2], 5).unwrap()] {
            let cache = ScoreCache::new();
            let res = inner_fit_cached(&stats, &targets, lambda, &cache).unwrap();
            let c = res.icpdag;
            let base =
                full_score_cached(&pdag_to_dag(&c).unwrap(), &targets, &stats, lambda, &cache)
                    .unwrap();
            for op in valid_inserts(&c) {
                let delta = insert_score_delta(&op, &c, &targets, &stats, lambda, &cache).unwrap();
                let completed =
                    gnies_completion(&apply_insert(&c, &op).unwrap(), &targets).unwrap();
                let after = full_score_cached(
                    &pdag_to_dag(&completed).unwrap(),
                    &targets,
                    &stats,
                    lambda,
                    &cache,
                )
                .unwrap();
                let diff = after.penalized - base.penalized;
                assert!(
                    (delta - diff).abs() <= 1e-9,
                    "{op}: delta {delta} vs full diff {diff}"
                );
            }
            for op in valid_deletes(&c) {
                let delta = delete_score_delta(&op, &c, &targets, &stats, lambda, &cache).unwrap();
                let completed =
                    gnies_completion(&apply_delete(&c, &op).unwrap(), &targets).unwrap();
                let after = full_score_cached(
                    &pdag_to_dag(&completed).unwrap(),
                    &targets,
                    &stats,
                    lambda,
                    &cache,
                )
                .unwrap();
                let diff = after.penalized - base.penalized;
                assert!(
                    (delta - diff).abs() <= 1e-9,
                    "{op}: delta {delta} vs full diff {diff}"
                );
            }
        }
    }

    #[test]
    fn independent_data_yields_empty_graph() {
        let gp = GenParams {
            p: 5,
            avg_degree: 0.0,
            weight_range: (0.5, 1.0),
            variance_range: (1.0, 2.0),
            intervention_variance_range: (5.0, 10.0),
            n_envs: 1,
            intervention_kind: InterventionKind::Noise,
            seed: 17,
        };
        let r = random_scm(&gp).unwrap();
        let data = vec![r.model.sample(0, 5000, 3).unwrap()];
        let stats = SufficientStats::from_data(&data).unwrap();
        let res = inner_fit(&stats, &TargetSet::empty(), bic_lambda(&stats)).unwrap();
        assert_eq!(res.icpdag.edge_count(), 0);
    }

    #[test]
    fn two_node_chain_is_recovered() {
        let mut b = nalgebra::DMatrix::zeros(2, 2);
        b[(1, 0)] = 0.9;
        let m =
            crate::scm::ScmModel::new(b, vec![nalgebra::DVector::from_vec(vec![1.0, 1.0])], vec![])
                .unwrap();
        let data = vec![m.sample(0, 2000, 5).unwrap()];
        let stats = SufficientStats::from_data(&data).unwrap();
        let lambda = bic_lambda(&stats);
        // the true edge has a positive insert delta from the empty class
        let cache = ScoreCache::new();
        let op = InsertOp {
            x: 0,
            y: 1,
            t: vec![],
        };
        let empty = Pdag::empty(2).unwrap();
        let delta =
            insert_score_delta(&op, &empty, &TargetSet::empty(), &stats, lambda, &cache).unwrap();
        assert!(delta > 0.0, "true-edge delta {delta}");
        let res = inner_fit(&stats, &TargetSet::empty(), lambda).unwrap();
        assert_eq!(res.icpdag.edge_count(), 1);
        assert!(res.icpdag.has_undirected(0, 1));
    }

    #[test]
    fn independent_data_gives_negative_insert_deltas() {
        // with no true edges and the BIC penalty, inserting anything is a
        // loss in nearly every run
        let mut negative = 0;
        let total = 100;
        for seed in 0..total {
            let gp = GenParams {
                p: 4,
                avg_degree: 0.0,
                weight_range: (0.5, 1.0),
                variance_range: (1.0, 2.0),
                intervention_variance_range: (5.0, 10.0),
                n_envs: 1,
                intervention_kind: InterventionKind::Noise,
                seed,
            };
            let r = random_scm(&gp).unwrap();
            let data = vec![r.model.sample(0, 5000, seed ^ 0xdead).unwrap()];
            let stats = SufficientStats::from_data(&data).unwrap();
            let lambda = bic_lambda(&stats);
            let cache = ScoreCache::new();
            let empty = Pdag::empty(4).unwrap();
            let all_negative = valid_inserts(&empty).iter().all(|op| {
                insert_score_delta(op, &empty, &TargetSet::empty(), &stats, lambda, &cache).unwrap()
                    < 0.0
            });
            negative += all_negative as usize;
        }
        assert!(
            negative >= 95,
            "only {negative}/{total} seeds fully negative"
        );
    }

    #[test]
    fn inner_fit_recovers_icpdag_with_true_targets() {
        // seed chosen so that the data's best-scoring class is the true one;
        // it also regression-tests the turning phase, without which this
        // instance gets stuck at a wrongly oriented target edge
        let (stats, truth) = protocol_stats(6, 3, 2000, 5);
        let lambda = bic_lambda(&stats);
        let res = inner_fit(&stats, &truth.targets, lambda).unwrap();
        let expected = dag_to_icpdag(&truth.model.graph().unwrap(), &truth.targets);
        assert_eq!(res.icpdag, expected);
    }

    #[test]
    fn search_is_deterministic() {
        let (stats, truth) = protocol_stats(6, 3, 300, 23);
        let lambda = bic_lambda(&stats);
        let a = gnies_fit(&stats, lambda, FitMethod::Greedy, &FitOptions::default()).unwrap();
        let b = gnies_fit(&stats, lambda, FitMethod::Greedy, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        let _ = truth;
    }

    #[test]
    fn cache_does_not_change_results() {
        for seed in 0..10 {
            let (stats, _) = protocol_stats(5, 3, 200, 31 + seed);
            let lambda = bic_lambda(&stats);
            let cached =
                gnies_fit(&stats, lambda, FitMethod::Greedy, &FitOptions::default()).unwrap();
            let uncached = gnies_fit(
                &stats,
                lambda,
                FitMethod::Greedy,
                &FitOptions {
                    use_cache: false,
                    ..FitOptions::default()
                },
            )
            .unwrap();
            assert_eq!(cached.icpdag, uncached.icpdag, "seed {seed}");
            assert_eq!(cached.targets, uncached.targets, "seed {seed}");
            assert_eq!(
                cached.score, uncached.score,
                "bit-level score equality (seed {seed})"
            );
        }
    }

    #[test]
    fn single_environment_estimates_no_targets() {
        let (stats, _) = protocol_stats(5, 1, 500, 3);
        let lambda = bic_lambda(&stats);
        let res = gnies_fit(&stats, lambda, FitMethod::Greedy, &FitOptions::default()).unwrap();
        assert!(res.targets.is_empty());
        // known targets are kept
        let known = TargetSet::new([2], 5).unwrap();
        let res = gnies_fit(
            &stats,
            lambda,
            FitMethod::Greedy,
            &FitOptions {
                known_targets: known,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(res.targets, known);
    }

    #[test]
    fn known_targets_are_retained_by_both_methods() {
        let (stats, truth) = protocol_stats(6, 4, 400, 9);
        let lambda = bic_lambda(&stats);
        let known = TargetSet::new([truth.targets.iter().next().unwrap()], 6).unwrap();
        for method in [FitMethod::Greedy, FitMethod::Rank] {
            let res = gnies_fit(
                &stats,
                lambda,
                method,
                &FitOptions {
                    known_targets: known,
                    ..FitOptions::default()
                },
            )
            .unwrap();
            assert!(known.is_subset_of(&res.targets));
        }
    }

    #[test]
    fn rank_uses_at_most_p_plus_one_inner_runs() {
        let (stats, _) = protocol_stats(6, 4, 300, 13);
        let lambda = bic_lambda(&stats);
        let res = gnies_fit(&stats, lambda, FitMethod::Rank, &FitOptions::default()).unwrap();
        assert!(
            res.inner_runs <= 7,
            "rank used {} inner runs at p = 6",
            res.inner_runs
        );
    }

    #[test]
    fn pooled_ges_matches_single_env_path() {
        let (stats, _) = protocol_stats(5, 3, 300, 19);
        let lambda = bic_lambda(&stats);
        let pooled = pool_stats(&stats);
        assert_eq!(pooled.n_envs(), 1);
        assert_eq!(pooled.n_total(), stats.n_total());
        let via_method =
            gnies_fit(&stats, lambda, FitMethod::PooledGes, &FitOptions::default()).unwrap();
        let direct = inner_fit(&pooled, &TargetSet::empty(), lambda).unwrap();
        assert_eq!(via_method.icpdag, direct.icpdag);
        assert_eq!(via_method.score, direct.score);
    }

    #[test]
    fn inner_fixpoint_applies_no_operators() {
        let (stats, truth) = protocol_stats(6, 3, 1000, 29);
        let lambda = bic_lambda(&stats);
        let cache = ScoreCache::new();
        let res = inner_fit_cached(&stats, &truth.targets, lambda, &cache).unwrap();
        let again = inner_fit_from(&stats, &truth.targets, lambda, &res.icpdag, &cache).unwrap();
        assert!(again.trace.is_empty(), "fixpoint applied {:?}", again.trace);
        assert_eq!(again.icpdag, res.icpdag);
    }

    #[test]
    fn forward_steps_increase_score_monotonically() {
        let (stats, truth) = protocol_stats(6, 3, 500, 37);
        let lambda = bic_lambda(&stats);
        let res = inner_fit(&stats, &truth.targets, lambda).unwrap();
        let mut last = f64::NEG_INFINITY;
        for step in &res.trace {
            assert!(step.delta > 0.0);
            assert!(step.score > last);
            last = step.score;
        }
    }

    #[test]
    fn result_json_round_trip() {
        let (stats, _) = protocol_stats(4, 2, 100, 41);
        let lambda = bic_lambda(&stats);
        let res = gnies_fit(&stats, lambda, FitMethod::Rank, &FitOptions::default()).unwrap();
        let s = serde_json::to_string(&res).unwrap();
        for field in [
            "icpdag", "targets", "score", "loglik", "dof", "lambda", "method", "trace",
        ] {
            assert!(s.contains(&format!("\"{field}\"")), "missing {field}");
        }
        let back: SearchResult = serde_json::from_str(&s).unwrap();
        assert_eq!(res, back);
    }

    #[test]
    fn full_score_reduction_for_ges() {
        // with a single environment the fitted score equals the plain
        // penalized Gaussian likelihood of the recovered class
        let (stats, _) = protocol_stats(4, 1, 400, 43);
        let lambda = bic_lambda(&stats);
        let res = inner_fit(&stats, &TargetSet::empty(), lambda).unwrap();
        let ext = pdag_to_dag(&res.icpdag).unwrap();
        let direct = full_score(&ext, &TargetSet::empty(), &stats, lambda).unwrap();
        assert_eq!(res.score, direct);
        let c = dag_to_cpdag(&ext);
        assert_eq!(c, res.icpdag);
        let _ = Dag::empty(1);
    }
}
