// SPDX-License-Identifier: MIT
//! Class-level evaluation: true/false discovery proportions between graph
//! classes, exact class equality, and the varsortability diagnostic.

use crate::graphs::{Dag, GraphClass};
use crate::scm::{ScmError, ScmModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("classes are over different node sets: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no directed-path-connected pairs: varsortability is undefined")]
    NoConnectedPairs,
    #[error(transparent)]
    Scm(#[from] ScmError),
}

/// Recovery metrics between a true class and an estimated class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tdp: f64,
    pub fdp: f64,
    /// Set equality of the member sets.
    pub exact: bool,
    pub true_class_size: usize,
    pub est_class_size: usize,
    /// Whether either class enumeration was capped; metrics over truncated
    /// classes are approximations.
    pub truncated: bool,
}

fn common_edges(a: &Dag, b: &Dag) -> usize {
    a.edges().iter().filter(|&&(i, j)| b.has_edge(i, j)).count()
}

/// True and false discovery proportions between graph classes.
///
/// Each estimate member is matched against its closest true member: TDP is
/// the worst (over estimates) best-match fraction of a true member's edges
/// recovered, and FDP is the worst best-match fraction of spurious edges.
/// Edge membership is by directed pair. A true member with no edges counts
/// as fully recovered; an estimate with no edges contributes no false
/// discoveries. Identical classes score exactly `(1, 0)`.
pub fn tdp_fdp(truth: &GraphClass, est: &GraphClass) -> Result<MetricReport, MetricsError> {
    if truth.p() != est.p() {
        return Err(MetricsError::DimensionMismatch(truth.p(), est.p()));
    }

    let mut tdp: f64 = 1.0;
    for e in est.members() {
        let term = truth
            .members()
            .map(|t| {
                let total = t.edge_count();
                if total == 0 {
                    1.0
                } else {
                    common_edges(t, e) as f64 / total as f64
                }
            })
            .fold(0.0, f64::max);
        tdp = tdp.min(term);
    }

    let mut fdp: f64 = 0.0;
    for e in est.members() {
        let total = e.edge_count();
        let term = if total == 0 {
            0.0
        } else {
            truth
                .members()
                .map(|t| (total - common_edges(e, t)) as f64 / total as f64)
                .fold(f64::INFINITY, f64::min)
        };
        fdp = fdp.max(term);
    }

    let truth_set: BTreeSet<&Dag> = truth.members().collect();
    let est_set: BTreeSet<&Dag> = est.members().collect();
    Ok(MetricReport {
        tdp,
        fdp,
        exact: truth_set == est_set,
        true_class_size: truth.len(),
        est_class_size: est.len(),
        truncated: false,
    })
}

/// Fraction of directed-path-connected ordered pairs `(i, j)` (with `i` an
/// ancestor of `j`) whose marginal variances increase along the path; ties
/// count one half.
pub fn varsortability(d: &Dag, variances: &[f64]) -> Result<f64, MetricsError> {
    let p = d.p();
    let mut pairs = 0usize;
    let mut score = 0.0;
    for i in 0..p {
        let desc = d.descendants_mask(i);
        for j in 0..p {
            if desc & (1u64 << j) == 0 {
                continue;
            }
            pairs += 1;
            if variances[i] < variances[j] {
                score += 1.0;
            } else if variances[i] == variances[j] {
                score += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(MetricsError::NoConnectedPairs);
    }
    Ok(score / pairs as f64)
}

/// Model-based varsortability, computed from the marginal variances of the
/// observational environment.
pub fn model_varsortability(m: &ScmModel) -> Result<f64, MetricsError> {
    let d = m.graph().map_err(ScmError::from)?;
    let cov = m.entailed_covariance(0)?;
    let variances: Vec<f64> = (0..m.p()).map(|i| cov.matrix()[(i, i)]).collect();
    varsortability(&d, &variances)
}
