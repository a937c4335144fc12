//! The graph Laplacian regularization layer: per-patch graph construction,
//! `mu` clamping, the QP solve and mean aggregation, recorded on a [`Tape`]
//! with an analytic backward.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{GlrError, Result};
use crate::graph::{
    assemble_laplacian, backward_graph, backward_qp, clamp_mu_or_identity, compute_edge_weights,
    solve_qp_multichannel, EdgeWeights, ExemplarPatch, GlrCache, SolveOptions,
};
use crate::patch::{aggregate_patches, PatchPlan};
use crate::tensor::Tensor;

/// Settings shared by every patch of one layer call.
#[derive(Debug, Clone, Copy)]
pub struct LayerSettings {
    pub kappa_max: f64,
    pub epsilon2x: f64,
    pub solve: SolveOptions,
    pub deterministic: bool,
}

struct PatchState {
    exemplars: ExemplarPatch,
    weights: EdgeWeights,
    /// One solve per image channel, sharing the graph and `mu`.
    caches: Vec<GlrCache>,
}

/// Per-call summary of the solves.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LayerStats {
    pub patches: usize,
    pub clamped: usize,
    pub mean_mu: f64,
    pub max_iterations: usize,
}

struct GlrLayerOp {
    plan: Arc<PatchPlan>,
    batch: usize,
    channels: usize,
    exemplars: usize,
    settings: LayerSettings,
    patches: Vec<PatchState>,
}

fn map_ordered<T, F>(n: usize, deterministic: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if deterministic {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

fn plane(data: &[f64], b: usize, c: usize, channels: usize, len: usize) -> &[f64] {
    &data[(b * channels + c) * len..][..len]
}

/// Records `X = GLR(F, Yhat, mu)` on `tape`.
///
/// `features` is `(B, N, H, W)`, `prefiltered` is `(B, C, H, W)` and `mu`
/// holds one raw value per patch in image-major, anchor-minor order. The
/// output has the shape of `prefiltered`.
pub fn glr_layer(
    tape: &mut Tape,
    features: Var,
    prefiltered: Var,
    mu: Var,
    plan: &Arc<PatchPlan>,
    settings: LayerSettings,
) -> Result<(Var, LayerStats)> {
    let (batch, n_ex, h, w) = tape.value(features).nchw()?;
    let (b2, channels, h2, w2) = tape.value(prefiltered).nchw()?;
    let k = plan.num_patches();
    if (b2, h2, w2) != (batch, h, w) || (h, w) != (plan.height(), plan.width()) {
        return Err(GlrError::Config(format!(
            "GLR layer: features {:?}, prefiltered {:?} and a {}x{} patch plan disagree",
            tape.shape(features),
            tape.shape(prefiltered),
            plan.height(),
            plan.width()
        )));
    }
    if tape.value(mu).numel() != batch * k {
        return Err(GlrError::Config(format!(
            "GLR layer: {} mu values for {} patches",
            tape.value(mu).numel(),
            batch * k
        )));
    }
    let fdata = tape.value(features).data();
    let ydata = tape.value(prefiltered).data();
    let mudata = tape.value(mu).data();
    let (side, m, hw) = (plan.side(), plan.patch_len(), h * w);

    let patches = map_ordered(batch * k, settings.deterministic, |idx| {
        let (b, p) = (idx / k, idx % k);
        let feats = (0..n_ex)
            .map(|n| {
                let mut v = vec![0.0; m];
                plan.extract_into(plane(fdata, b, n, n_ex, hw), p, &mut v);
                v
            })
            .collect();
        let exemplars = ExemplarPatch::new(side, feats)?;
        let weights = compute_edge_weights(&exemplars, settings.epsilon2x)?;
        let lap = Arc::new(assemble_laplacian(&weights));
        let clamped = clamp_mu_or_identity(mudata[idx], &lap, settings.kappa_max)?;
        let rhs: Vec<Vec<f64>> = (0..channels)
            .map(|c| {
                let mut v = vec![0.0; m];
                plan.extract_into(plane(ydata, b, c, channels, hw), p, &mut v);
                v
            })
            .collect();
        let rhs_refs: Vec<&[f64]> = rhs.iter().map(Vec::as_slice).collect();
        let caches = solve_qp_multichannel(&lap, clamped, &rhs_refs, settings.solve)?;
        Ok(PatchState {
            exemplars,
            weights,
            caches,
        })
    })?;

    let mut out = vec![0.0; batch * channels * hw];
    for b in 0..batch {
        for c in 0..channels {
            let solved: Vec<&[f64]> = (0..k)
                .map(|p| patches[b * k + p].caches[c].solution())
                .collect();
            out[(b * channels + c) * hw..][..hw]
                .copy_from_slice(&aggregate_patches(&solved, plan)?);
        }
    }

    let stats = LayerStats {
        patches: patches.len(),
        clamped: patches.iter().filter(|s| s.caches[0].mu().clamped).count(),
        mean_mu: patches.iter().map(|s| s.caches[0].mu().value).sum::<f64>() / patches.len() as f64,
        max_iterations: patches
            .iter()
            .flat_map(|s| s.caches.iter().map(GlrCache::iterations))
            .max()
            .unwrap_or(0),
    };
    let output = Tensor::new([batch, channels, h, w], out)?;
    let op = GlrLayerOp {
        plan: Arc::clone(plan),
        batch,
        channels,
        exemplars: n_ex,
        settings,
        patches,
    };
    Ok((
        tape.custom(&[features, prefiltered, mu], output, Box::new(op)),
        stats,
    ))
}

struct PatchGrads {
    mu: f64,
    rhs: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
}

impl CustomOp for GlrLayerOp {
    fn name(&self) -> &str {
        "glr_layer"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let plan = self.plan.as_ref();
        let (k, m, hw) = (
            plan.num_patches(),
            plan.patch_len(),
            plan.height() * plan.width(),
        );
        let (channels, n_ex) = (self.channels, self.exemplars);
        let inv_cov: Vec<f64> = plan.coverage().iter().map(|&c| 1.0 / c as f64).collect();

        let grads = map_ordered(self.batch * k, self.settings.deterministic, |idx| {
            let (b, p) = (idx / k, idx % k);
            let state = &self.patches[idx];
            let mut mu = 0.0;
            let mut edge = vec![0.0; state.weights.len()];
            let mut rhs = Vec::with_capacity(channels);
            let mut g = vec![0.0; m];
            let mut cov = vec![0.0; m];
            plan.extract_into(&inv_cov, p, &mut cov);
            for (c, cache) in state.caches.iter().enumerate() {
                plan.extract_into(plane(upstream, b, c, channels, hw), p, &mut g);
                let qp = backward_qp(cache, &g, Some(&cov), self.settings.solve)?;
                mu += qp.grad_mu;
                edge.iter_mut()
                    .zip(&qp.grad_edge_weights)
                    .for_each(|(e, q)| *e += q);
                rhs.push(qp.grad_rhs);
            }
            let features = backward_graph(
                &state.exemplars,
                &state.weights,
                &edge,
                self.settings.epsilon2x,
            )?;
            Ok(PatchGrads { mu, rhs, features })
        })?;

        let mut d_features = vec![0.0; self.batch * n_ex * hw];
        let mut d_rhs = vec![0.0; self.batch * channels * hw];
        let mut d_mu = vec![0.0; self.batch * k];
        for (idx, pg) in grads.iter().enumerate() {
            let (b, p) = (idx / k, idx % k);
            d_mu[idx] = pg.mu;
            for (c, g) in pg.rhs.iter().enumerate() {
                plan.scatter_add(g, p, 1.0, &mut d_rhs[(b * channels + c) * hw..][..hw]);
            }
            for (n, g) in pg.features.iter().enumerate() {
                plan.scatter_add(g, p, 1.0, &mut d_features[(b * n_ex + n) * hw..][..hw]);
            }
        }
        Ok(vec![d_features, d_rhs, d_mu])
    }
}
