// SPDX-License-Identifier: MIT
//! Shared setup for the benchmark targets.

use gnies::scm::{random_scm, GenParams, InterventionKind, RandomScm};
use gnies::score::SufficientStats;

/// Protocol-style model and statistics at the requested size.
pub fn protocol_instance(
    p: usize,
    n_envs: usize,
    n: usize,
    seed: u64,
) -> (SufficientStats, RandomScm) {
    let gp = GenParams {
        p,
        avg_degree: 2.7,
        weight_range: (0.5, 1.0),
        variance_range: (1.0, 2.0),
        intervention_variance_range: (5.0, 10.0),
        n_envs,
        intervention_kind: InterventionKind::Noise,
        seed,
    };
    let drawn = random_scm(&gp).expect("valid protocol parameters");
    let data: Vec<_> = (0..n_envs)
        .map(|e| drawn.model.sample(e, n, seed ^ 0xbe9c).expect("sampling"))
        .collect();
    let stats = SufficientStats::from_data(&data).expect("well-formed data");
    (stats, drawn)
}
