//! One regularization block, the shared-parameter cascade, and inference
//! helpers on [`ImagePlane`]s.

use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{GlrError, Result};
use crate::harness::blur::gaussian_blur;
use crate::harness::image::ImagePlane;
use crate::net::config::{CascadeConfig, ExemplarMode, NetConfig, CLASSIC_BLUR_SIGMA};
use crate::net::layer::{glr_layer, LayerSettings, LayerStats};
use crate::net::networks::{cnn_f_forward, cnn_mu_forward, cnn_prefilter_forward};
use crate::params::ModelParams;
use crate::patch::{plan_patches, PatchPlan};
use crate::tensor::Tensor;

fn settings(cfg: &CascadeConfig) -> LayerSettings {
    LayerSettings {
        kappa_max: cfg.kappa_max,
        epsilon2x: cfg.epsilon2x,
        solve: cfg.solve,
        deterministic: cfg.deterministic,
    }
}

/// Patch plan for a `(B, C, H, W)` input under `cfg`.
pub fn plan_for(cfg: &CascadeConfig, height: usize, width: usize) -> Result<Arc<PatchPlan>> {
    Ok(Arc::new(plan_patches(
        height, width, cfg.patch, cfg.stride,
    )?))
}

/// One block `Y_t -> X_t`. `params` may be `None` only in classic mode.
pub fn block_forward(
    tape: &mut Tape,
    params: Option<&ModelParams>,
    cfg: &CascadeConfig,
    plan: &Arc<PatchPlan>,
    input: Var,
) -> Result<(Var, LayerStats)> {
    let (batch, channels, h, w) = tape.value(input).nchw()?;
    match cfg.mode {
        ExemplarMode::Learned => {
            let params = params
                .ok_or_else(|| GlrError::Usage("learned mode needs model parameters".into()))?;
            let features = cnn_f_forward(tape, params, input)?;
            let prefiltered = cnn_prefilter_forward(tape, params, input)?;
            let patches = tape.extract_patches(input, Arc::clone(plan))?;
            let mu = cnn_mu_forward(tape, params, patches)?;
            glr_layer(tape, features, prefiltered, mu, plan, settings(cfg))
        }
        ExemplarMode::Classic => {
            let hw = h * w;
            let blurred: Vec<f64> = tape
                .value(input)
                .data()
                .chunks(hw)
                .flat_map(|p| gaussian_blur(p, h, w, CLASSIC_BLUR_SIGMA))
                .collect();
            let features = tape.leaf(Tensor::new([batch, channels, h, w], blurred)?);
            let mu = tape.leaf(Tensor::full([batch * plan.num_patches()], cfg.mu));
            glr_layer(tape, features, input, mu, plan, settings(cfg))
        }
    }
}

/// `cfg.cascades` applications of the same block; returns `X_T` and the
/// statistics of each block.
pub fn cascade_forward(
    tape: &mut Tape,
    params: Option<&ModelParams>,
    cfg: &CascadeConfig,
    input: Var,
) -> Result<(Var, Vec<LayerStats>)> {
    cfg.validate()?;
    let (_, _, h, w) = tape.value(input).nchw()?;
    let plan = plan_for(cfg, h, w)?;
    let mut x = input;
    let mut stats = Vec::with_capacity(cfg.cascades);
    for _ in 0..cfg.cascades {
        let (next, s) = block_forward(tape, params, cfg, &plan, x)?;
        x = next;
        stats.push(s);
    }
    Ok((x, stats))
}

pub(crate) fn plane_tensor(plane: &ImagePlane) -> Tensor {
    Tensor::new(
        [1, plane.channels(), plane.height(), plane.width()],
        plane.data().to_vec(),
    )
    .expect("plane extents")
}

/// Runs the cascade on one image without keeping the tape.
pub fn denoise(
    params: Option<&ModelParams>,
    cfg: &CascadeConfig,
    noisy: &ImagePlane,
) -> Result<ImagePlane> {
    let mut tape = Tape::new();
    let x = tape.leaf(plane_tensor(noisy));
    let (out, _) = cascade_forward(&mut tape, params, cfg, x)?;
    let data = tape.value(out).data().to_vec();
    Ok(
        ImagePlane::new(noisy.height(), noisy.width(), noisy.channels(), data)?
            .with_provenance(format!("denoised({})", noisy.provenance)),
    )
}

/// `mean((gt - out)^2)`.
pub fn loss_mse(gt: &ImagePlane, out: &ImagePlane) -> Result<f64> {
    crate::harness::metrics::mse(gt, out)
}

/// Grid search over `mus x eps2s` in classic mode, scored by PSNR against
/// `clean`. Returns `(mu, epsilon2x, psnr)` of the best pair.
pub fn classic_grid_search(
    clean: &ImagePlane,
    noisy: &ImagePlane,
    base: &CascadeConfig,
    mus: &[f64],
    eps2s: &[f64],
) -> Result<(f64, f64, f64)> {
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for &mu in mus {
        for &e in eps2s {
            let cfg = CascadeConfig {
                mode: ExemplarMode::Classic,
                mu,
                epsilon2x: e,
                ..base.clone()
            };
            let out = denoise(None, &cfg, noisy)?;
            let score = crate::harness::metrics::psnr(clean, &out)?;
            if score > best.2 {
                best = (mu, e, score);
            }
        }
    }
    Ok(best)
}

const META_KEYS: [&str; 13] = [
    "channels",
    "exemplars",
    "f_w0",
    "f_w1",
    "f_w2",
    "prefilter_width",
    "mu_w0",
    "mu_w1",
    "mu_hidden",
    "cascades",
    "patch",
    "stride",
    "kappa_max",
];

/// Writes parameters plus the configuration needed to rebuild the model.
pub fn model_checkpoint(
    params: &ModelParams,
    net: &NetConfig,
    cfg: &CascadeConfig,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.add_params(params)?;
    let values = [
        net.channels as f64,
        cfg.exemplars as f64,
        net.f_widths[0] as f64,
        net.f_widths[1] as f64,
        net.f_widths[2] as f64,
        net.prefilter_width as f64,
        net.mu_widths[0] as f64,
        net.mu_widths[1] as f64,
        net.mu_hidden as f64,
        cfg.cascades as f64,
        cfg.patch as f64,
        cfg.stride as f64,
        cfg.kappa_max,
    ];
    for (k, v) in META_KEYS.iter().zip(values) {
        ck.set_meta(k, v)?;
    }
    ck.set_meta("epsilon2x", cfg.epsilon2x)?;
    Ok(ck)
}

pub fn save_model(
    path: impl AsRef<Path>,
    params: &ModelParams,
    net: &NetConfig,
    cfg: &CascadeConfig,
) -> Result<()> {
    model_checkpoint(params, net, cfg)?.save(path)
}

/// Parameters, network widths and a learned-mode cascade config.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, NetConfig, CascadeConfig)> {
    let ck = Checkpoint::load(path)?;
    let get = |k: &str| {
        ck.meta(k)
            .ok_or_else(|| GlrError::Checkpoint(format!("model metadata `{k}` missing")))
    };
    let u = |k: &str| get(k).map(|v| v as usize);
    let net = NetConfig {
        channels: u("channels")?,
        f_widths: [u("f_w0")?, u("f_w1")?, u("f_w2")?],
        prefilter_width: u("prefilter_width")?,
        mu_widths: [u("mu_w0")?, u("mu_w1")?],
        mu_hidden: u("mu_hidden")?,
        ..NetConfig::default()
    };
    let cfg = CascadeConfig {
        cascades: u("cascades")?,
        patch: u("patch")?,
        stride: u("stride")?,
        kappa_max: get("kappa_max")?,
        exemplars: u("exemplars")?,
        epsilon2x: get("epsilon2x")?,
        mode: ExemplarMode::Learned,
        ..CascadeConfig::default()
    };
    cfg.validate()?;
    Ok((ck.params()?, net, cfg))
}
