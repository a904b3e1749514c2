// SPDX-License-Identifier: MIT
//! Independent optimization oracle for the per-node maximum likelihood
//! estimate. The oracle profiles the per-environment variances out of the
//! objective and minimizes over the coefficients by coordinate descent with
//! golden-section line searches; it shares no code with the alternating
//! optimizer it checks.

use gnies::score::{local_mle, LocalKey, SufficientStats};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Profiled objective for an intervened node: `sum_e n_e (1 + ln q_e(b))`
/// up to the `ln 2pi` constant, with `q_e` the quadratic residual.
fn profiled_objective(stats: &SufficientStats, node: usize, parents: &[usize], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for e in 0..stats.n_envs() {
        let s = stats.sigma(e);
        let mut q = s[(node, node)];
        for (a, &pa) in parents.iter().enumerate() {
            q -= 2.0 * b[a] * s[(pa, node)];
            for (c, &pb) in parents.iter().enumerate() {
                q += b[a] * b[c] * s[(pa, pb)];
            }
        }
        let q = q.max(1e-300);
        total += stats.n(e) as f64 * (1.0 + q.ln());
    }
    total
}

fn golden_section(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 < f2 {
        x1
    } else {
        x2
    }
}

/// Coordinate descent from a given start; returns the best objective seen.
fn descend(stats: &SufficientStats, node: usize, parents: &[usize], start: &[f64]) -> f64 {
    let mut b = start.to_vec();
    let mut best = profiled_objective(stats, node, parents, &b);
    for _ in 0..300 {
        let before = best;
        for k in 0..b.len() {
            let current = b[k];
            let mut trial = b.clone();
            let picked = golden_section(
                |v| {
                    trial[k] = v;
                    profiled_objective(stats, node, parents, &trial)
                },
                current - 3.0,
                current + 3.0,
                120,
            );
            trial[k] = picked;
            let val = profiled_objective(stats, node, parents, &trial);
            if val < best {
                best = val;
                b = trial;
            }
        }
        if (before - best).abs() <= 1e-13 * before.abs().max(1.0) {
            break;
        }
    }
    best
}

fn oracle_objective(
    stats: &SufficientStats,
    node: usize,
    parents: &[usize],
    starts: &[Vec<f64>],
) -> f64 {
    starts
        .iter()
        .map(|s| descend(stats, node, parents, s))
        .fold(f64::INFINITY, f64::min)
}

fn random_stats(p: usize, n_envs: usize, n: usize, seed: u64) -> SufficientStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // correlated columns so the regression problems are non-trivial
    let mix = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else if rng.random::<f64>() < 0.5 {
            rng.random_range(-0.8..0.8)
        } else {
            0.0
        }
    });
    let data: Vec<DMatrix<f64>> = (0..n_envs)
        .map(|_| {
            let raw = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            raw * &mix
        })
        .collect();
    SufficientStats::from_data(&data).unwrap()
}

#[test]
fn alternating_mle_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..25u64 {
        let stats = random_stats(4, 3, 200, 1000 + case);
        let node = (rng.random::<u32>() as usize) % 4;
        let n_parents = 1 + (rng.random::<u32>() as usize) % 2;
        let parents: Vec<usize> = (0..4).filter(|&i| i != node).take(n_parents).collect();

        let key = LocalKey::new(node, parents.clone(), true).unwrap();
        let mle = local_mle(&key, &stats).unwrap();
        assert!(mle.converged, "case {case}");
        let impl_obj = profiled_objective(&stats, node, &parents, &mle.coefs);

        let zeros = vec![0.0; parents.len()];
        let jitter: Vec<f64> = mle.coefs.iter().map(|c| c + 0.5).collect();
        let oracle = oracle_objective(&stats, node, &parents, &[zeros, mle.coefs.clone(), jitter]);

        assert!(
            (impl_obj - oracle).abs() <= 1e-4,
            "case {case}: implementation {impl_obj} vs oracle {oracle}"
        );
    }
}

#[test]
fn single_environment_reduces_to_ols() {
    // independent OLS path computed from raw data via normal equations
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 300;
    let p = 4;
    let mix = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.4 });
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal)) * mix;
    let stats = SufficientStats::from_data(std::slice::from_ref(&x)).unwrap();

    let mut centered = x;
    for j in 0..p {
        let mean = centered.column(j).sum() / n as f64;
        for r in 0..n {
            centered[(r, j)] -= mean;
        }
    }
    let node = 0;
    let parents = [1usize, 2];
    let design = DMatrix::from_fn(n, 2, |r, c| centered[(r, parents[c])]);
    let target = centered.column(node).into_owned();
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &target;
    let coef = gram.cholesky().unwrap().solve(&rhs);
    let resid = &target - design * &coef;
    let ols_var = resid.dot(&resid) / n as f64;

    let key = LocalKey::new(node, parents, false).unwrap();
    let mle = local_mle(&key, &stats).unwrap();
    assert!((mle.coefs[0] - coef[0]).abs() < 1e-10);
    assert!((mle.coefs[1] - coef[1]).abs() < 1e-10);
    assert!((mle.omegas[0] - ols_var).abs() < 1e-10);
}
