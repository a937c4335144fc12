//! Combinatorial graph Laplacian `L = D - A` in compressed-row form.

use super::weights::EdgeWeights;

/// Symmetric Laplacian of a weighted graph with at most 9 nonzeros per row
/// when built on the 8-connected grid pattern.
#[derive(Debug, Clone)]
pub struct SparseLaplacian {
    edges: EdgeWeights,
    degrees: Vec<f64>,
    d_max: f64,
    argmax_degree: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseLaplacian {
    pub fn num_vertices(&self) -> usize {
        self.degrees.len()
    }

    pub fn edges(&self) -> &EdgeWeights {
        &self.edges
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Maximum weighted vertex degree.
    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// First vertex (lowest index) attaining `d_max`.
    pub fn argmax_degree(&self) -> usize {
        self.argmax_degree
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `out = L x`
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *o = acc;
        }
    }

    /// `out = (I + mu L) x`
    pub fn apply_system(&self, mu: f64, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *o = x[i] + mu * acc;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.num_vertices();
        let mut dense = vec![vec![0.0; m]; m];
        for (i, row) in dense.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] = self.values[k];
            }
        }
        dense
    }
}

/// Builds `L = D - A` from an edge list.
pub fn assemble_laplacian(weights: &EdgeWeights) -> SparseLaplacian {
    let m = weights.num_vertices();
    let mut degrees = vec![0.0; m];
    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(8); m];
    for (&(i, j), &w) in weights.pairs().iter().zip(weights.weights()) {
        degrees[i] += w;
        degrees[j] += w;
        neighbors[i].push((j, -w));
        neighbors[j].push((i, -w));
    }

    let mut row_ptr = Vec::with_capacity(m + 1);
    let mut col_idx = Vec::with_capacity(m + 2 * weights.len());
    let mut values = Vec::with_capacity(m + 2 * weights.len());
    row_ptr.push(0);
    for (i, row) in neighbors.iter_mut().enumerate() {
        row.push((i, degrees[i]));
        row.sort_by_key(|&(j, _)| j);
        for &(j, v) in row.iter() {
            col_idx.push(j);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }

    let (argmax_degree, d_max) =
        degrees
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, d)| {
                if d > best.1 {
                    (i, d)
                } else {
                    best
                }
            });

    SparseLaplacian {
        edges: weights.clone(),
        degrees,
        d_max: if m == 0 { 0.0 } else { d_max },
        argmax_degree,
        row_ptr,
        col_idx,
        values,
    }
}

/// Graph Laplacian regularizer `x^T L x = sum_edges w_ij (x_i - x_j)^2`.
pub fn regularizer_value(laplacian: &SparseLaplacian, x: &[f64]) -> f64 {
    let edges = laplacian.edges();
    edges
        .pairs()
        .iter()
        .zip(edges.weights())
        .map(|(&(i, j), &w)| {
            let d = x[i] - x[j];
            w * d * d
        })
        .sum()
}
