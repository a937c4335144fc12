//! Edge weights of the 8-connected pixel graph built from exemplar features.

use crate::error::{GlrError, Result};

/// `N` feature vectors over the pixels of one square patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPatch {
    side: usize,
    features: Vec<Vec<f64>>,
}

impl ExemplarPatch {
    pub fn new(side: usize, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.is_empty() {
            return Err(GlrError::Config("at least one exemplar is required".into()));
        }
        let m = side * side;
        for (n, f) in features.iter().enumerate() {
            if f.len() != m {
                return Err(GlrError::Config(format!(
                    "exemplar {n} has {} values, patch side {side} needs {m}",
                    f.len()
                )));
            }
            if let Some(i) = f.iter().position(|v| !v.is_finite()) {
                return Err(GlrError::Data(format!(
                    "exemplar {n} is non-finite at pixel {i}"
                )));
            }
        }
        Ok(ExemplarPatch { side, features })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    pub fn count(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }
}

/// Vertex pairs `(i, j)`, `i < j`, of the 8-connected grid on a `side`×`side`
/// patch, listed in row-major order of `i` then ascending `j`.
pub fn grid_pairs(side: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(4 * side * side);
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            if c + 1 < side {
                pairs.push((i, i + 1));
            }
            if r + 1 < side {
                if c > 0 {
                    pairs.push((i, i + side - 1));
                }
                pairs.push((i, i + side));
                if c + 1 < side {
                    pairs.push((i, i + side + 1));
                }
            }
        }
    }
    pairs
}

/// Weighted edge list of an undirected graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    num_vertices: usize,
    pairs: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

impl EdgeWeights {
    /// Arbitrary edge list; pairs must satisfy `i < j < num_vertices`.
    pub fn new(num_vertices: usize, pairs: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if pairs.len() != weights.len() {
            return Err(GlrError::Config(format!(
                "{} edges but {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= j || j >= num_vertices) {
            return Err(GlrError::Config(format!(
                "edge ({i}, {j}) invalid for {num_vertices} vertices"
            )));
        }
        Ok(EdgeWeights {
            num_vertices,
            pairs,
            weights,
        })
    }

    /// Weights on the full 8-connected pattern of a square patch.
    pub fn grid(side: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(side * side, grid_pairs(side), weights)
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Gaussian-kernel weights `w_ij = exp(-dist(i,j) / two_eps_sq)` over the
/// 8-connected grid, where `dist` is the squared feature-space distance.
pub fn compute_edge_weights(exemplars: &ExemplarPatch, two_eps_sq: f64) -> Result<EdgeWeights> {
    if !(two_eps_sq > 0.0 && two_eps_sq.is_finite()) {
        return Err(GlrError::Config(format!(
            "kernel bandwidth 2eps^2 must be positive, got {two_eps_sq}"
        )));
    }
    let pairs = grid_pairs(exemplars.side);
    let weights = pairs
        .iter()
        .map(|&(i, j)| {
            let dist: f64 = exemplars
                .features
                .iter()
                .map(|f| {
                    let d = f[i] - f[j];
                    d * d
                })
                .sum();
            (-dist / two_eps_sq).exp()
        })
        .collect();
    Ok(EdgeWeights {
        num_vertices: exemplars.len(),
        pairs,
        weights,
    })
}

/// Pulls per-edge weight gradients back onto the exemplar features.
///
/// `dw_ij/df_n(i) = w_ij (f_n(j) - f_n(i)) / eps^2` and the `j` endpoint
/// receives the negated term.
pub fn backward_graph(
    exemplars: &ExemplarPatch,
    weights: &EdgeWeights,
    grad_edge_weights: &[f64],
    two_eps_sq: f64,
) -> Result<Vec<Vec<f64>>> {
    if grad_edge_weights.len() != weights.len() || weights.num_vertices != exemplars.len() {
        return Err(GlrError::Config(format!(
            "edge gradient length {} / graph of {} edges on {} vertices does not match exemplar patch of {} pixels",
            grad_edge_weights.len(),
            weights.len(),
            weights.num_vertices,
            exemplars.len()
        )));
    }
    let eps_sq = 0.5 * two_eps_sq;
    let mut grads = vec![vec![0.0; exemplars.len()]; exemplars.count()];
    for ((&(i, j), &w), &gw) in weights
        .pairs
        .iter()
        .zip(&weights.weights)
        .zip(grad_edge_weights)
    {
        let scale = gw * w / eps_sq;
        if scale == 0.0 {
            continue;
        }
        for (f, g) in exemplars.features.iter().zip(grads.iter_mut()) {
            let t = scale * (f[j] - f[i]);
            g[i] += t;
            g[j] -= t;
        }
    }
    Ok(grads)
}
