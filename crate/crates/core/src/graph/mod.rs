//! Graph Laplacian regularization on square patches: graph construction from
//! exemplars, the stabilized QP solve and its analytic backward pass.

mod laplacian;
mod solve;
mod spectrum;
mod weights;

pub use laplacian::{assemble_laplacian, regularizer_value, SparseLaplacian};
pub use solve::{
    backward_qp, clamp_mu, clamp_mu_or_identity, dense_solve, solve_qp, solve_qp_multichannel,
    ClampedMu, GlrCache, QpGrads, SolveMethod, SolveOptions, DEFAULT_KAPPA_MAX,
};
pub use spectrum::{condition_number_estimate, lambda_max_estimate, lambda_min_estimate};
pub use weights::{backward_graph, compute_edge_weights, grid_pairs, EdgeWeights, ExemplarPatch};
