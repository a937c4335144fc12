//! Finite-difference verification of every analytic gradient in the
//! pipeline, from single tape operations up to a full cascade.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::Result;
use crate::graph::{
    assemble_laplacian, backward_graph, backward_qp, compute_edge_weights, dense_solve, solve_qp,
    EdgeWeights, ExemplarPatch, SolveMethod, SolveOptions, SparseLaplacian,
};
use crate::harness::fd::{central_difference, relative_error};
use crate::harness::noise::add_awgn_in_place;
use crate::harness::synth::piecewise_smooth;
use crate::net::block::cascade_forward;
use crate::net::config::{CascadeConfig, NetConfig};
use crate::net::networks::init_params;
use crate::params::{glorot_uniform, ModelParams};
use crate::tensor::Tensor;

/// Step used by every central difference in the suite.
pub const FD_STEP: f64 = 1e-6;
pub const COMPONENT_THRESHOLD: f64 = 1e-5;
pub const CASCADE_THRESHOLD: f64 = 1e-4;
pub const LINEAR_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub component: String,
    /// `max |analytic - fd| / max(|analytic|, |fd|)` over the tensor.
    pub max_rel_error: f64,
    /// `max |analytic - fd|`.
    pub max_abs_error: f64,
    /// Smallest discrepancy the finite differences can resolve; zero when
    /// the relative error alone decides.
    pub fd_resolution: f64,
    pub threshold: f64,
}

impl GradcheckEntry {
    /// Within the relative threshold, or every discrepancy below what the
    /// finite differences can resolve.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold || self.max_abs_error <= self.fd_resolution
    }

    pub fn resolution_limited(&self) -> bool {
        self.max_rel_error >= self.threshold && self.passed()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<32} max_rel_err {:.3e}  threshold {:.0e}  {}",
                e.component,
                e.max_rel_error,
                e.threshold,
                match (e.passed(), e.resolution_limited()) {
                    (true, false) => "PASS".to_string(),
                    (true, true) => format!(
                        "PASS (max abs diff {:.1e} within fd resolution {:.1e})",
                        e.max_abs_error, e.fd_resolution
                    ),
                    _ => "FAIL".to_string(),
                }
            )?;
        }
        write!(f, "overall {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(n, -1.0, 1.0, rng)).expect("numel from shape")
}

/// Relative errors of one random regularization-layer instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpCheck {
    pub mu: f64,
    pub rhs: f64,
    pub edge_weights: f64,
    pub features: f64,
}

impl QpCheck {
    pub fn max(&self) -> f64 {
        self.mu
            .max(self.rhs)
            .max(self.edge_weights)
            .max(self.features)
    }
}

/// `a + b` as an unevaluated pair `(sum, error)`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `b - (I + mu L) x` from the edge list, accumulated in double-double.
fn residual_dd(lap: &SparseLaplacian, mu: f64, b: &[f64], x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut lx = vec![(0.0f64, 0.0f64); m];
    let mut add = |i: usize, v: (f64, f64)| {
        let (s, e) = two_sum(lx[i].0, v.0);
        lx[i] = (s, e + lx[i].1 + v.1);
    };
    let edges = lap.edges();
    for (&(i, j), &w) in edges.pairs().iter().zip(edges.weights()) {
        let (d, de) = two_sum(x[i], -x[j]);
        let p = w * d;
        let term = (p, w.mul_add(d, -p) + w * de);
        add(i, term);
        add(j, (-term.0, -term.1));
    }
    (0..m)
        .map(|i| {
            let (hi, lo) = lx[i];
            let p = mu * hi;
            let (mu_hi, mu_lo) = (p, mu.mul_add(hi, -p) + mu * lo);
            let (s, e) = two_sum(b[i], -x[i]);
            let (s, e2) = two_sum(s, -mu_hi);
            s + (e + e2 - mu_lo)
        })
        .collect()
}

/// Dense solve polished by iterative refinement with extra-precise
/// residuals: accurate to a few ulps of `x` whatever the conditioning, so
/// finite differences of it resolve small gradients.
pub fn refined_solve(lap: &SparseLaplacian, mu: f64, b: &[f64]) -> Vec<f64> {
    let mut x = dense_solve(lap, mu, b);
    for _ in 0..3 {
        let r = residual_dd(lap, mu, b, &x);
        let d = dense_solve(lap, mu, &r);
        x.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
    }
    x
}

/// Draws an instance on a `side x side` patch with `exemplars` feature maps
/// and `mu` in `(0, 10)`, and compares the analytic gradients of
/// `e(x) = <g, x> + |x|^2 / 2` against central differences on exact solves.
pub fn qp_instance_check(side: usize, exemplars: usize, rng: &mut impl Rng) -> Result<QpCheck> {
    let m = side * side;
    let two_eps_sq = 1.0;
    let features: Vec<Vec<f64>> = (0..exemplars).map(|_| uniform(m, 0.0, 1.0, rng)).collect();
    let rhs = uniform(m, 0.0, 1.0, rng);
    let g = uniform(m, -1.0, 1.0, rng);
    let mu = rng.random_range(0.0..10.0);

    let ex = ExemplarPatch::new(side, features.clone())?;
    let weights = compute_edge_weights(&ex, two_eps_sq)?;
    let lap = Arc::new(assemble_laplacian(&weights));
    // `e(x) - e(x0)` expanded per pixel, so the differences never subtract
    // two O(1) loss values.
    let x0 = refined_solve(&lap, mu, &rhs);
    let loss = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&x0)
            .zip(&g)
            .map(|((x, x0), g)| (x - x0) * (g + 0.5 * (x + x0)))
            .sum()
    };
    let cache = solve_qp(&lap, mu, &rhs, SolveOptions::default())?;
    let upstream: Vec<f64> = g.iter().zip(cache.solution()).map(|(g, x)| g + x).collect();
    let qp = backward_qp(&cache, &upstream, None, SolveOptions::default())?;
    let dfeat = backward_graph(&ex, &weights, &qp.grad_edge_weights, two_eps_sq)?;

    let fd_mu = central_difference(
        |v| loss(&refined_solve(&lap, v[0], &rhs)),
        &[mu],
        &[0],
        FD_STEP,
    );
    let idx: Vec<usize> = (0..m).collect();
    let fd_rhs = central_difference(|v| loss(&refined_solve(&lap, mu, v)), &rhs, &idx, FD_STEP);
    let pairs = weights.pairs().to_vec();
    let edge_idx: Vec<usize> = (0..pairs.len()).collect();
    let fd_edge = central_difference(
        |w| {
            let ew = EdgeWeights::new(m, pairs.clone(), w.to_vec()).expect("same graph");
            loss(&refined_solve(&assemble_laplacian(&ew), mu, &rhs))
        },
        weights.weights(),
        &edge_idx,
        FD_STEP,
    );
    let flat: Vec<f64> = features.concat();
    let flat_idx: Vec<usize> = (0..flat.len()).collect();
    let fd_feat = central_difference(
        |f| {
            let ex = ExemplarPatch::new(side, f.chunks(m).map(<[f64]>::to_vec).collect())
                .expect("finite");
            let w = compute_edge_weights(&ex, two_eps_sq).expect("valid bandwidth");
            loss(&refined_solve(&assemble_laplacian(&w), mu, &rhs))
        },
        &flat,
        &flat_idx,
        FD_STEP,
    );
    Ok(QpCheck {
        mu: relative_error(&[qp.grad_mu], &fd_mu),
        rhs: relative_error(&qp.grad_rhs, &fd_rhs),
        edge_weights: relative_error(&qp.grad_edge_weights, &fd_edge),
        features: relative_error(&dfeat.concat(), &fd_feat),
    })
}

/// `de/dmu` for two vertices joined by a unit edge, `y = (1, 0)`, `mu = 1`
/// and `e = |x - (1/2, 1/2)|^2 / 2`. The exact value is `-1/27`.
pub fn two_vertex_grad_mu() -> Result<f64> {
    let ew = EdgeWeights::new(2, vec![(0, 1)], vec![1.0])?;
    let lap = Arc::new(assemble_laplacian(&ew));
    let cache = solve_qp(&lap, 1.0, &[1.0, 0.0], SolveOptions::default())?;
    let x = cache.solution();
    let upstream = [x[0] - 0.5, x[1] - 0.5];
    Ok(backward_qp(&cache, &upstream, None, SolveOptions::default())?.grad_mu)
}

/// Rounding error of a central difference of a loss of size `value`: with
/// each evaluation accurate to a few dozen ulps, differences below this
/// level cannot be resolved at step [`FD_STEP`].
pub fn fd_noise_floor(value: f64) -> f64 {
    32.0 * f64::EPSILON * value.abs() / FD_STEP
}

/// Relative and absolute discrepancy between two gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub rel: f64,
    pub abs: f64,
    pub fd_resolution: f64,
}

fn discrepancy(analytic: &[f64], numeric: &[f64], fd_resolution: f64) -> Discrepancy {
    Discrepancy {
        rel: relative_error(analytic, numeric),
        abs: analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max),
        fd_resolution,
    }
}

type Loss = dyn Fn(&ModelParams, &Tensor) -> Result<(f64, Tape, Var, Var)>;

/// Per-parameter-tensor relative errors for `loss`, plus the error on the input.
fn check_params(
    params: &ModelParams,
    input: &Tensor,
    loss: &Loss,
) -> Result<Vec<(String, Discrepancy)>> {
    let (value, mut tape, out, x) = loss(params, input)?;
    let noise = fd_noise_floor(value);
    tape.reverse_pass(out)?;
    let grads = tape.param_grads()?;
    let mut errors = Vec::new();
    for (name, t) in params.iter() {
        let idx: Vec<usize> = (0..t.numel()).collect();
        let fd = central_difference(
            |v| {
                let mut q = params.clone();
                q.set_data(name, v).expect("same length");
                loss(&q, input).map(|r| r.0).unwrap_or(f64::NAN)
            },
            t.data(),
            &idx,
            FD_STEP,
        );
        errors.push((
            name.to_string(),
            discrepancy(grads.get(name).expect("every param"), &fd, noise),
        ));
    }
    let idx: Vec<usize> = (0..input.numel()).collect();
    let fd = central_difference(
        |v| {
            let t = Tensor::new(input.shape().to_vec(), v.to_vec()).expect("same shape");
            loss(params, &t).map(|r| r.0).unwrap_or(f64::NAN)
        },
        input.data(),
        &idx,
        FD_STEP,
    );
    errors.push((
        "input".into(),
        discrepancy(tape.grad(x).expect("input reached"), &fd, noise),
    ));
    Ok(errors)
}

fn insert_random(params: &mut ModelParams, name: &str, shape: &[usize], rng: &mut impl Rng) {
    params
        .insert(name, random_tensor(shape, rng))
        .expect("unique names");
}

/// Every tape operation in one small graph, checked against central differences.
pub fn tensor_ops_check(seed: u64) -> Result<Vec<(String, Discrepancy)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    for (name, shape) in [
        ("c1.w", &[3, 2, 3, 3][..]),
        ("c1.b", &[3]),
        ("c2.w", &[3, 3, 3, 3]),
        ("c2.b", &[3]),
        ("t.w", &[3, 2, 2, 2]),
        ("t.b", &[2]),
        ("c3.w", &[2, 4, 3, 3]),
        ("c3.b", &[2]),
        ("fc.w", &[3, 18]),
        ("fc.b", &[3]),
    ] {
        insert_random(&mut p, name, shape, &mut rng);
    }
    let input = random_tensor(&[1, 2, 6, 6], &mut rng);
    let target = random_tensor(&[1, 3], &mut rng);
    let scale_by = random_tensor(&[1, 3], &mut rng);
    let loss = move |params: &ModelParams, input: &Tensor| -> Result<(f64, Tape, Var, Var)> {
        let mut t = Tape::new();
        let x = t.leaf(input.clone());
        let w1 = t.param(params, "c1.w")?;
        let b1 = t.param(params, "c1.b")?;
        let h = t.conv2d(x, w1, b1, 2, Padding::Same)?;
        let h = t.relu(h);
        let w2 = t.param(params, "c2.w")?;
        let b2 = t.param(params, "c2.b")?;
        let h = t.conv2d(h, w2, b2, 1, Padding::Same)?;
        let wt = t.param(params, "t.w")?;
        let bt = t.param(params, "t.b")?;
        let up = t.conv_transpose2d(h, wt, bt)?;
        let cat = t.concat_channels(up, x)?;
        let w3 = t.param(params, "c3.w")?;
        let b3 = t.param(params, "c3.b")?;
        let h = t.conv2d(cat, w3, b3, 1, Padding::Same)?;
        let h = t.relu(h);
        let h = t.max_pool_2x2(h)?;
        let h = t.reshape(h, [1, 18])?;
        let wf = t.param(params, "fc.w")?;
        let bf = t.param(params, "fc.b")?;
        let y = t.linear(h, wf, bf)?;
        let s = t.leaf(scale_by.clone());
        let y = t.mul(y, s)?;
        let y = t.add(y, y)?;
        let y = t.scale(y, 0.5);
        let out = t.mse(y, &target)?;
        let v = t.value(out).data()[0];
        Ok((v, t, out, x))
    };
    check_params(&p, &input, &loss)
}

/// Convolutions and a linear layer without nonlinearities under a linear
/// loss: central differences are exact up to rounding.
pub fn linear_network_check(seed: u64) -> Result<Vec<(String, Discrepancy)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    insert_random(&mut p, "c.w", &[2, 1, 3, 3], &mut rng);
    insert_random(&mut p, "c.b", &[2], &mut rng);
    insert_random(&mut p, "fc.w", &[2, 32], &mut rng);
    insert_random(&mut p, "fc.b", &[2], &mut rng);
    let input = random_tensor(&[1, 1, 4, 4], &mut rng);
    let loss = |params: &ModelParams, input: &Tensor| -> Result<(f64, Tape, Var, Var)> {
        let mut t = Tape::new();
        let x = t.leaf(input.clone());
        let w = t.param(params, "c.w")?;
        let b = t.param(params, "c.b")?;
        let h = t.conv2d(x, w, b, 1, Padding::Same)?;
        let h = t.reshape(h, [1, 32])?;
        let wf = t.param(params, "fc.w")?;
        let bf = t.param(params, "fc.b")?;
        let y = t.linear(h, wf, bf)?;
        let out = t.sum(y);
        let v = t.value(out).data()[0];
        Ok((v, t, out, x))
    };
    check_params(&p, &input, &loss)
}

/// Network widths and cascade settings small enough for exhaustive
/// finite differences: 16x16 input, 8x8 patches at stride 6, two exemplars.
pub fn tiny_cascade_config() -> (NetConfig, CascadeConfig) {
    let net = NetConfig {
        channels: 1,
        f_widths: [2, 3, 4],
        prefilter_width: 2,
        mu_widths: [2, 2],
        mu_hidden: 3,
        mu_bias_init: 1.0,
    };
    let cfg = CascadeConfig {
        cascades: 2,
        patch: 8,
        stride: 6,
        exemplars: 2,
        epsilon2x: 0.05,
        solve: SolveOptions {
            tol: 1e-13,
            method: SolveMethod::DenseCholesky,
            ..SolveOptions::default()
        },
        ..CascadeConfig::default()
    };
    (net, cfg)
}

/// End-to-end check of the training loss of a two-block cascade with
/// respect to every parameter tensor.
pub fn tiny_cascade_check(seed: u64) -> Result<Vec<(String, Discrepancy)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, cfg) = tiny_cascade_config();
    let mut params = init_params(&net, cfg.exemplars, cfg.patch, &mut rng)?;
    // off the ReLU kinks that zero biases create on dead inputs
    let c3 = glorot_uniform(&[1, net.prefilter_width, 3, 3], 18, 9, &mut rng);
    params.set_data("p.c3.w", c3.data())?;
    let biases: Vec<String> = params
        .names()
        .filter(|n| n.ends_with(".b"))
        .map(str::to_string)
        .collect();
    for name in biases {
        let n = params.get(&name).map_or(0, Tensor::numel);
        let mut b = uniform(n, -0.1, 0.1, &mut rng);
        match name.as_str() {
            "m.fc1.b" => b.iter_mut().for_each(|v| *v += 3.0),
            // keeps the hidden units of the mu estimator active
            "m.fc0.b" => b.iter_mut().for_each(|v| *v += 0.5),
            _ => {}
        }
        params.set_data(&name, &b)?;
    }

    let clean = piecewise_smooth(16, 16, rng.random());
    let mut noisy = clean.data().to_vec();
    add_awgn_in_place(&mut noisy, 25.0, &mut rng);
    let clean = Tensor::new([1, 1, 16, 16], clean.into_data())?;
    let input = Tensor::new([1, 1, 16, 16], noisy)?;
    let loss = move |params: &ModelParams, input: &Tensor| -> Result<(f64, Tape, Var, Var)> {
        let mut t = Tape::new();
        let x = t.leaf(input.clone());
        let (y, _) = cascade_forward(&mut t, Some(params), &cfg, x)?;
        let out = t.mse(y, &clean)?;
        let v = t.value(out).data()[0];
        Ok((v, t, out, x))
    };
    check_params(&params, &input, &loss)
}

fn worst(errors: &[(String, Discrepancy)]) -> f64 {
    errors.iter().map(|e| e.1.rel).fold(0.0, f64::max)
}

/// Runs every check for `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    let mut push = |component: &str, err: f64, threshold: f64| {
        entries.push(GradcheckEntry {
            component: component.into(),
            max_rel_error: err,
            max_abs_error: f64::INFINITY,
            fd_resolution: 0.0,
            threshold,
        })
    };
    push(
        "tensor ops",
        worst(&tensor_ops_check(seed)?),
        COMPONENT_THRESHOLD,
    );
    push(
        "linear network",
        worst(&linear_network_check(seed)?),
        LINEAR_THRESHOLD,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = [0.0f64; 4];
    for _ in 0..10 {
        let c = qp_instance_check(6, 2, &mut rng)?;
        for (a, v) in acc
            .iter_mut()
            .zip([c.mu, c.rhs, c.edge_weights, c.features])
        {
            *a = a.max(v);
        }
    }
    push("backward_qp mu", acc[0], COMPONENT_THRESHOLD);
    push("backward_qp rhs", acc[1], COMPONENT_THRESHOLD);
    push("backward_qp edge weights", acc[2], COMPONENT_THRESHOLD);
    push("backward_graph exemplars", acc[3], COMPONENT_THRESHOLD);

    let two = two_vertex_grad_mu()?;
    push(
        "two-vertex closed form (abs)",
        (two + 1.0 / 27.0).abs(),
        1e-10,
    );

    for (name, d) in tiny_cascade_check(seed)? {
        entries.push(GradcheckEntry {
            component: format!("cascade {name}"),
            max_rel_error: d.rel,
            max_abs_error: d.abs,
            fd_resolution: d.fd_resolution,
            threshold: CASCADE_THRESHOLD,
        });
    }
    Ok(GradcheckReport { seed, entries })
}
