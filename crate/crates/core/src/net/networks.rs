//! The three sub-networks of a block: the hourglass exemplar network, the
//! residual prefilter and the per-patch `mu` estimator.

use rand::Rng;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{GlrError, Result};
use crate::net::config::NetConfig;
use crate::params::{glorot_uniform, ModelParams};
use crate::tensor::Tensor;

fn conv_param(
    params: &mut ModelParams,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let w = glorot_uniform(&[out, inp, k, k], inp * k * k, out * k * k, rng);
    params
        .insert(format!("{name}.w"), w)
        .expect("unique layer names");
    params
        .insert(format!("{name}.b"), Tensor::zeros([out]))
        .expect("unique layer names");
}

fn tconv_param(params: &mut ModelParams, name: &str, inp: usize, out: usize, rng: &mut impl Rng) {
    let w = glorot_uniform(&[inp, out, 2, 2], inp * 4, out * 4, rng);
    params
        .insert(format!("{name}.w"), w)
        .expect("unique layer names");
    params
        .insert(format!("{name}.b"), Tensor::zeros([out]))
        .expect("unique layer names");
}

fn linear_param(params: &mut ModelParams, name: &str, out: usize, inp: usize, rng: &mut impl Rng) {
    params
        .insert(
            format!("{name}.w"),
            glorot_uniform(&[out, inp], inp, out, rng),
        )
        .expect("unique layer names");
    params
        .insert(format!("{name}.b"), Tensor::zeros([out]))
        .expect("unique layer names");
}

#[derive(Clone, Copy)]
enum Stage {
    /// `k`×`k` convolution with the given stride.
    Conv(usize, usize),
    /// 2×2 transposed convolution with stride 2.
    Up,
}

/// Deepest path through [`cnn_f_forward`]; both skip paths lie inside its window.
const EXEMPLAR_PATH: [Stage; 11] = [
    Stage::Conv(3, 1),
    Stage::Conv(3, 1),
    Stage::Conv(3, 2),
    Stage::Conv(3, 1),
    Stage::Conv(3, 2),
    Stage::Conv(3, 1),
    Stage::Up,
    Stage::Conv(3, 1),
    Stage::Up,
    Stage::Conv(3, 1),
    Stage::Conv(3, 1),
];

const fn receptive_field(path: &[Stage]) -> usize {
    let (mut rf, mut jump, mut i) = (1, 1, 0);
    while i < path.len() {
        match path[i] {
            Stage::Conv(k, stride) => {
                rf += (k - 1) * jump;
                jump *= stride;
            }
            // Each output reads exactly one input pixel.
            Stage::Up => jump /= 2,
        }
        i += 1;
    }
    rf
}

/// Side of the input window one exemplar pixel depends on.
pub const EXEMPLAR_RECEPTIVE_FIELD: usize = receptive_field(&EXEMPLAR_PATH);

/// Spatial side of the `mu` network features after its two pooling steps.
pub fn mu_feature_side(patch: usize) -> usize {
    patch / 2 / 2
}

/// Glorot-uniform weights and zero biases for all three networks, except
/// the prefilter's last convolution (zero, so the prefilter starts as the
/// identity) and the final `mu` bias (`net.mu_bias_init`).
pub fn init_params(
    net: &NetConfig,
    exemplars: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    let q = mu_feature_side(patch);
    if q == 0 {
        return Err(GlrError::Sizing(format!(
            "patch side {patch} is too small for two 2x2 pooling steps"
        )));
    }
    let c = net.channels;
    let [w1, w2, w3] = net.f_widths;
    let mut p = ModelParams::new();

    conv_param(&mut p, "f.enc0", w1, c, 3, rng);
    conv_param(&mut p, "f.enc1", w1, w1, 3, rng);
    conv_param(&mut p, "f.down1", w2, w1, 3, rng);
    conv_param(&mut p, "f.enc2", w2, w2, 3, rng);
    conv_param(&mut p, "f.down2", w3, w2, 3, rng);
    conv_param(&mut p, "f.mid", w3, w3, 3, rng);
    tconv_param(&mut p, "f.up1", w3, w2, rng);
    conv_param(&mut p, "f.merge1", w2, 2 * w2, 3, rng);
    tconv_param(&mut p, "f.up2", w2, w1, rng);
    conv_param(&mut p, "f.merge2", w1, 2 * w1, 3, rng);
    conv_param(&mut p, "f.out", exemplars, w1, 3, rng);

    let wp = net.prefilter_width;
    conv_param(&mut p, "p.c0", wp, c, 3, rng);
    conv_param(&mut p, "p.c1", wp, wp, 3, rng);
    conv_param(&mut p, "p.c2", wp, wp, 3, rng);
    conv_param(&mut p, "p.c3", c, wp, 3, rng);
    p.set_data("p.c3.w", &vec![0.0; c * wp * 9])?;

    let [m1, m2] = net.mu_widths;
    conv_param(&mut p, "m.c0", m1, c, 3, rng);
    conv_param(&mut p, "m.c1", m1, m1, 3, rng);
    conv_param(&mut p, "m.c2", m2, m1, 3, rng);
    conv_param(&mut p, "m.c3", m2, m2, 3, rng);
    linear_param(&mut p, "m.fc0", net.mu_hidden, m2 * q * q, rng);
    linear_param(&mut p, "m.fc1", 1, net.mu_hidden, rng);
    p.set_data("m.fc1.b", &[net.mu_bias_init])?;
    Ok(p)
}

fn conv(tape: &mut Tape, params: &ModelParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv2d(x, w, b, stride, Padding::Same)
}

fn conv_relu(
    tape: &mut Tape,
    params: &ModelParams,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let y = conv(tape, params, name, x, stride)?;
    Ok(tape.relu(y))
}

fn tconv(tape: &mut Tape, params: &ModelParams, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv_transpose2d(x, w, b)
}

/// Hourglass exemplar network: `(B, C, H, W) -> (B, N, H, W)`.
/// `H` and `W` must be multiples of 4.
pub fn cnn_f_forward(tape: &mut Tape, params: &ModelParams, image: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(image).nchw()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(GlrError::Sizing(format!(
            "exemplar network needs height and width divisible by 4, got {h}x{w}; pad or crop the image"
        )));
    }
    let x = conv_relu(tape, params, "f.enc0", image, 1)?;
    let skip1 = conv_relu(tape, params, "f.enc1", x, 1)?;
    let x = conv_relu(tape, params, "f.down1", skip1, 2)?;
    let skip2 = conv_relu(tape, params, "f.enc2", x, 1)?;
    let x = conv_relu(tape, params, "f.down2", skip2, 2)?;
    let x = conv_relu(tape, params, "f.mid", x, 1)?;
    let x = tconv(tape, params, "f.up1", x)?;
    let x = tape.concat_channels(x, skip2)?;
    let x = conv_relu(tape, params, "f.merge1", x, 1)?;
    let x = tconv(tape, params, "f.up2", x)?;
    let x = tape.concat_channels(x, skip1)?;
    let x = conv_relu(tape, params, "f.merge2", x, 1)?;
    conv(tape, params, "f.out", x, 1)
}

/// Residual prefilter: `Y + r(Y)` with four convolutions in `r`.
pub fn cnn_prefilter_forward(tape: &mut Tape, params: &ModelParams, image: Var) -> Result<Var> {
    let x = conv_relu(tape, params, "p.c0", image, 1)?;
    let x = conv_relu(tape, params, "p.c1", x, 1)?;
    let x = conv_relu(tape, params, "p.c2", x, 1)?;
    let r = conv(tape, params, "p.c3", x, 1)?;
    tape.add(image, r)
}

/// Per-patch `mu` estimator: `(P, C, s, s) -> (P, 1)`, nonnegative.
pub fn cnn_mu_forward(tape: &mut Tape, params: &ModelParams, patches: Var) -> Result<Var> {
    let (p, _, s, s2) = tape.value(patches).nchw()?;
    let q = mu_feature_side(s);
    let expected = params
        .get("m.fc0.w")
        .map(|t| t.shape()[1])
        .ok_or_else(|| GlrError::Config("missing parameter `m.fc0.w`".into()))?;
    let width = params.get("m.c3.b").map_or(0, Tensor::numel);
    if s != s2 || width * q * q != expected {
        return Err(GlrError::Sizing(format!(
            "mu network was built for a different patch size than {s}x{s2}"
        )));
    }
    let x = conv_relu(tape, params, "m.c0", patches, 1)?;
    let x = conv_relu(tape, params, "m.c1", x, 1)?;
    let x = tape.max_pool_2x2(x)?;
    let x = conv_relu(tape, params, "m.c2", x, 1)?;
    let x = conv_relu(tape, params, "m.c3", x, 1)?;
    let x = tape.max_pool_2x2(x)?;
    let x = tape.reshape(x, [p, expected])?;
    let w = tape.param(params, "m.fc0.w")?;
    let b = tape.param(params, "m.fc0.b")?;
    let x = tape.linear(x, w, b)?;
    let x = tape.relu(x);
    let w = tape.param(params, "m.fc1.w")?;
    let b = tape.param(params, "m.fc1.b")?;
    let x = tape.linear(x, w, b)?;
    Ok(tape.relu(x))
}
