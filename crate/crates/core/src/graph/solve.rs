//! Regularized QP `argmin_x ||y - x||^2 + mu x^T L x`, solved through its
//! normal equations `(I + mu L) x = y`, and its implicit backward pass.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::laplacian::SparseLaplacian;
use crate::error::{GlrError, Result};

/// Default bound on the condition number of `I + mu L`.
pub const DEFAULT_KAPPA_MAX: f64 = 250.0;

/// Regularization weight after the stability clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampedMu {
    /// Value produced upstream, before clamping.
    pub raw: f64,
    /// Value used in the solve.
    pub value: f64,
    /// `raw >= mu_max`; the clamp passes no gradient to `raw`.
    pub clamped: bool,
    /// `(kappa_max - 1) / (2 d_max)`, or infinity when no clamp applies.
    pub mu_max: f64,
}

impl ClampedMu {
    pub fn unclamped(mu: f64) -> Self {
        ClampedMu {
            raw: mu,
            value: mu,
            clamped: false,
            mu_max: f64::INFINITY,
        }
    }

    /// Derivative of `value` with respect to `raw`.
    pub fn subgradient(&self) -> f64 {
        if self.clamped {
            0.0
        } else {
            1.0
        }
    }
}

impl From<f64> for ClampedMu {
    fn from(mu: f64) -> Self {
        ClampedMu::unclamped(mu)
    }
}

/// Truncates `mu_raw` at `mu_max = (kappa_max - 1) / (2 d_max)`, which keeps
/// the condition number of `I + mu L` at or below `kappa_max` (the largest
/// eigenvalue is bounded by `1 + 2 mu d_max` through Gershgorin discs).
///
/// Returns [`GlrError::DegenerateGraph`] when `d_max == 0`; the system is
/// then the identity and callers may use `mu_raw` as is.
pub fn clamp_mu(mu_raw: f64, laplacian: &SparseLaplacian, kappa_max: f64) -> Result<ClampedMu> {
    if !(mu_raw >= 0.0) || !mu_raw.is_finite() {
        return Err(GlrError::Data(format!(
            "mu must be finite and nonnegative, got {mu_raw}"
        )));
    }
    if !(kappa_max > 1.0) {
        return Err(GlrError::Config(format!(
            "kappa_max must exceed 1, got {kappa_max}"
        )));
    }
    let d_max = laplacian.d_max();
    if !(d_max > 0.0) {
        return Err(GlrError::DegenerateGraph);
    }
    let mu_max = (kappa_max - 1.0) / (2.0 * d_max);
    let clamped = mu_raw >= mu_max;
    Ok(ClampedMu {
        raw: mu_raw,
        value: if clamped { mu_max } else { mu_raw },
        clamped,
        mu_max,
    })
}

/// [`clamp_mu`] with the degenerate-graph fallback applied.
pub fn clamp_mu_or_identity(
    mu_raw: f64,
    laplacian: &SparseLaplacian,
    kappa_max: f64,
) -> Result<ClampedMu> {
    match clamp_mu(mu_raw, laplacian, kappa_max) {
        Err(GlrError::DegenerateGraph) => Ok(ClampedMu::unclamped(mu_raw)),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Jacobi-preconditioned conjugate gradients.
    ConjugateGradient,
    /// Dense Cholesky factorization; exact to rounding, for small verification problems.
    DenseCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative residual `||b - M x|| / ||b||` at which CG stops.
    pub tol: f64,
    /// Iteration cap as a multiple of the system size.
    pub max_iter_factor: usize,
    pub method: SolveMethod,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter_factor: 10,
            method: SolveMethod::ConjugateGradient,
        }
    }
}

/// Forward byproducts of one patch solve, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GlrCache {
    solution: Vec<f64>,
    rhs: Vec<f64>,
    mu: ClampedMu,
    laplacian: Arc<SparseLaplacian>,
    iterations: usize,
    residual: f64,
    tol: f64,
}

impl GlrCache {
    pub fn solution(&self) -> &[f64] {
        &self.solution
    }

    pub fn into_solution(self) -> Vec<f64> {
        self.solution
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn mu(&self) -> ClampedMu {
        self.mu
    }

    pub fn laplacian(&self) -> &Arc<SparseLaplacian> {
        &self.laplacian
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Relative residual of the stored solution.
    pub fn residual(&self) -> f64 {
        self.residual
    }
}

/// Jacobi-preconditioned conjugate gradients for `I + mu L`.
struct Pcg<'a> {
    laplacian: &'a SparseLaplacian,
    mu: f64,
    inv_diag: Vec<f64>,
    opts: SolveOptions,
}

impl<'a> Pcg<'a> {
    fn new(laplacian: &'a SparseLaplacian, mu: f64, opts: SolveOptions) -> Self {
        let inv_diag = laplacian
            .degrees()
            .iter()
            .map(|d| 1.0 / (1.0 + mu * d))
            .collect();
        Pcg {
            laplacian,
            mu,
            inv_diag,
            opts,
        }
    }

    fn relative_residual(&self, b: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
        self.laplacian.apply_system(self.mu, x, scratch);
        let r: f64 = b
            .iter()
            .zip(scratch.iter())
            .map(|(b, a)| (b - a) * (b - a))
            .sum();
        r.sqrt() / norm(b)
    }

    /// Returns the solution, iteration count and final relative residual.
    fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, usize, f64)> {
        let m = b.len();
        let b_norm = norm(b);
        if b_norm == 0.0 {
            return Ok((vec![0.0; m], 0, 0.0));
        }
        if self.opts.method == SolveMethod::DenseCholesky {
            let x = dense_solve(self.laplacian, self.mu, b);
            let mut scratch = vec![0.0; m];
            let residual = self.relative_residual(b, &x, &mut scratch);
            return Ok((x, 0, residual));
        }
        let max_iter = self.opts.max_iter_factor * m.max(1);
        let target = self.opts.tol * b_norm;

        // Warm start at b: exact for mu = 0 and for signals in the nullspace of L.
        let mut x = b.to_vec();
        let mut ap = vec![0.0; m];
        self.laplacian.apply_system(self.mu, &x, &mut ap);
        let mut r: Vec<f64> = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.inv_diag).map(|(r, d)| r * d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut iterations = 0;

        loop {
            if norm(&r) <= target {
                // Guard against drift of the recursive residual.
                let true_res = self.relative_residual(b, &x, &mut ap);
                if true_res <= self.opts.tol {
                    return Ok((x, iterations, true_res));
                }
                self.laplacian.apply_system(self.mu, &x, &mut ap);
                for ((ri, bi), ai) in r.iter_mut().zip(b).zip(&ap) {
                    *ri = bi - ai;
                }
                for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&self.inv_diag) {
                    *zi = ri * di;
                }
                p.copy_from_slice(&z);
                rz = dot(&r, &z);
            }
            if iterations >= max_iter {
                let residual = self.relative_residual(b, &x, &mut ap);
                return Err(GlrError::SolverFailure {
                    iterations,
                    residual,
                });
            }
            self.laplacian.apply_system(self.mu, &p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
                z[i] = r[i] * self.inv_diag[i];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..m {
                p[i] = z[i] + beta * p[i];
            }
            iterations += 1;
        }
    }
}

/// Solves `(I + mu L) x = b` by dense Cholesky factorization.
pub fn dense_solve(laplacian: &SparseLaplacian, mu: f64, b: &[f64]) -> Vec<f64> {
    let m = laplacian.num_vertices();
    let mut sys = DMatrix::<f64>::identity(m, m);
    for i in 0..m {
        for k in laplacian.row_ptr()[i]..laplacian.row_ptr()[i + 1] {
            sys[(i, laplacian.col_idx()[k])] += mu * laplacian.values()[k];
        }
    }
    sys.cholesky()
        .expect("I + mu L is positive definite for mu >= 0")
        .solve(&DVector::from_column_slice(b))
        .as_slice()
        .to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `(I + mu L) x = rhs` with Jacobi-preconditioned CG.
pub fn solve_qp(
    laplacian: &Arc<SparseLaplacian>,
    mu: impl Into<ClampedMu>,
    rhs: &[f64],
    opts: SolveOptions,
) -> Result<GlrCache> {
    let mut out = solve_qp_multichannel(laplacian, mu, &[rhs], opts)?;
    Ok(out.pop().expect("one channel in, one cache out"))
}

/// Solves one system per channel, all sharing the same graph and `mu`.
pub fn solve_qp_multichannel(
    laplacian: &Arc<SparseLaplacian>,
    mu: impl Into<ClampedMu>,
    rhs_channels: &[&[f64]],
    opts: SolveOptions,
) -> Result<Vec<GlrCache>> {
    let mu = mu.into();
    if !(mu.value >= 0.0) || !mu.value.is_finite() {
        return Err(GlrError::Data(format!(
            "mu must be finite and nonnegative, got {}",
            mu.value
        )));
    }
    let m = laplacian.num_vertices();
    let pcg = Pcg::new(laplacian, mu.value, opts);
    rhs_channels
        .iter()
        .map(|rhs| {
            if rhs.len() != m {
                return Err(GlrError::Config(format!(
                    "right-hand side has {} entries, graph has {m} vertices",
                    rhs.len()
                )));
            }
            let (solution, iterations, residual) = pcg.solve(rhs)?;
            Ok(GlrCache {
                solution,
                rhs: rhs.to_vec(),
                mu,
                laplacian: Arc::clone(laplacian),
                iterations,
                residual,
                tol: opts.tol,
            })
        })
        .collect()
}

/// Gradients of a scalar loss through one patch solve.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGrads {
    /// With respect to the raw (pre-clamp) `mu`.
    pub grad_mu: f64,
    /// With respect to the effective `mu` used by the solve.
    pub grad_mu_effective: f64,
    pub grad_rhs: Vec<f64>,
    /// One entry per edge of the cached Laplacian, including the dependence
    /// of `mu_max` on `d_max` when the clamp is active.
    pub grad_edge_weights: Vec<f64>,
}

/// Implicit backward of [`solve_qp`].
///
/// With `M = I + mu L` and `z = M^-1 g` (one extra solve):
/// `de/dy = z`, `de/dmu = -z^T L x`, `de/dw_ij = -mu (z_i - z_j)(x_i - x_j)`.
/// `pixel_weights`, when given, scales `upstream` elementwise first.
pub fn backward_qp(
    cache: &GlrCache,
    upstream: &[f64],
    pixel_weights: Option<&[f64]>,
    opts: SolveOptions,
) -> Result<QpGrads> {
    let lap = cache.laplacian.as_ref();
    let m = lap.num_vertices();
    if upstream.len() != m || pixel_weights.is_some_and(|c| c.len() != m) {
        return Err(GlrError::Config(format!(
            "upstream gradient of length {} for a {m}-vertex solve",
            upstream.len()
        )));
    }
    let mu = cache.mu.value;
    let pcg = Pcg::new(lap, mu, opts);

    let mut scratch = vec![0.0; m];
    let residual = if norm(&cache.rhs) == 0.0 {
        norm(&cache.solution)
    } else {
        pcg.relative_residual(&cache.rhs, &cache.solution, &mut scratch)
    };
    if residual > cache.tol {
        return Err(GlrError::StaleCache {
            residual,
            tolerance: cache.tol,
        });
    }

    let g: Vec<f64> = match pixel_weights {
        Some(c) => upstream.iter().zip(c).map(|(g, c)| g * c).collect(),
        None => upstream.to_vec(),
    };
    let (z, _, _) = pcg.solve(&g)?;
    let x = &cache.solution;

    lap.apply(x, &mut scratch);
    let grad_mu_effective = -dot(&z, &scratch);

    let edges = lap.edges();
    let mut grad_edge_weights: Vec<f64> = edges
        .pairs()
        .iter()
        .map(|&(i, j)| -mu * (z[i] - z[j]) * (x[i] - x[j]))
        .collect();

    if cache.mu.clamped {
        // mu = (kappa - 1) / (2 d_max): d mu / d d_max = -mu / d_max, and
        // d_max moves with every edge incident to the maximizing vertex.
        let v = lap.argmax_degree();
        let coeff = grad_mu_effective * (-mu / lap.d_max());
        for (gw, &(i, j)) in grad_edge_weights.iter_mut().zip(edges.pairs()) {
            if i == v || j == v {
                *gw += coeff;
            }
        }
    }

    Ok(QpGrads {
        grad_mu: grad_mu_effective * cache.mu.subgradient(),
        grad_mu_effective,
        grad_rhs: z,
        grad_edge_weights,
    })
}
