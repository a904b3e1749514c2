// SPDX-License-Identifier: MIT
//! Greedy noise-interventional equivalence search (GnIES) for linear Gaussian
//! structural causal models observed across multiple environments with unknown
//! intervention targets.
//!
//! The crate is organized around five subsystems:
//!
//! - [`graphs`]: DAG/PDAG types and the purely graphical machinery — skeletons,
//!   v-structures, Meek closure, consistent extension, (I-)CPDAG construction,
//!   class completion, equivalence tests and exhaustive enumeration oracles.
//! - [`scm`]: linear Gaussian SCMs — entailed covariances, sampling, random
//!   generation, noise/hard interventions, and brute-force distribution
//!   equivalence oracles for small instances.
//! - [`score`]: the penalized multi-environment Gaussian likelihood score —
//!   sufficient statistics, per-node maximum likelihood (closed form and
//!   alternating), degrees of freedom, and the local-score cache.
//! - [`search`]: the GES-style inner procedure with insert/delete operators and
//!   class completion, plus the greedy and ranking outer procedures over
//!   intervention-target sets.
//! - [`metrics`]: class-level evaluation (TDP/FDP), exact class equality, and
//!   the varsortability diagnostic.
//!
//! The most common entry points are re-exported at the crate root.

pub mod graphs;
pub mod metrics;
pub mod scm;
pub mod score;
pub mod search;

pub use graphs::{Dag, GraphClass, Pdag, TargetFamily, TargetSet};
pub use metrics::MetricReport;
pub use scm::{GenParams, InterventionKind, ScmModel};
pub use score::{LocalKey, ScoreCache, ScoreValue, SufficientStats};
pub use search::{gnies_fit, inner_fit, pool_stats, FitMethod, FitOptions, SearchResult};
