//! Eigenvalue estimates for `I + mu L` by power and inverse iteration.
//!
//! Both return Rayleigh quotients, so the largest-eigenvalue estimate never
//! exceeds the true value and the smallest never undershoots it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::laplacian::SparseLaplacian;
use super::solve::{solve_qp, SolveOptions};
use crate::error::Result;
use std::sync::Arc;

fn start_vector(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn rayleigh(laplacian: &SparseLaplacian, mu: f64, v: &[f64], scratch: &mut [f64]) -> f64 {
    laplacian.apply_system(mu, v, scratch);
    v.iter()
        .zip(scratch.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / v.iter().map(|a| a * a).sum::<f64>()
}

pub fn lambda_max_estimate(
    laplacian: &SparseLaplacian,
    mu: f64,
    iterations: usize,
    seed: u64,
) -> f64 {
    let m = laplacian.num_vertices();
    let mut v = start_vector(m, seed);
    let mut w = vec![0.0; m];
    for _ in 0..iterations {
        laplacian.apply_system(mu, &v, &mut w);
        std::mem::swap(&mut v, &mut w);
        normalize(&mut v);
    }
    rayleigh(laplacian, mu, &v, &mut w)
}

pub fn lambda_min_estimate(
    laplacian: &Arc<SparseLaplacian>,
    mu: f64,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let m = laplacian.num_vertices();
    let mut v = start_vector(m, seed);
    let opts = SolveOptions::default();
    for _ in 0..iterations {
        v = solve_qp(laplacian, mu, &v, opts)?.into_solution();
        normalize(&mut v);
    }
    let mut w = vec![0.0; m];
    Ok(rayleigh(laplacian, mu, &v, &mut w))
}

/// Ratio of the two estimates above, a lower bound on the true condition number.
pub fn condition_number_estimate(
    laplacian: &Arc<SparseLaplacian>,
    mu: f64,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    Ok(lambda_max_estimate(laplacian, mu, iterations, seed)
        / lambda_min_estimate(laplacian, mu, iterations, seed)?)
}
