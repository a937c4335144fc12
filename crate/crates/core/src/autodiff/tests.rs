use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::GlrError;
use crate::harness::fd::{central_difference, relative_error};
use crate::params::ModelParams;
use crate::patch::plan_patches;
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Direct sliding-window cross-correlation with explicit zero padding.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn conv_oracle(
    x: &Tensor,
    k: &Tensor,
    b: &[f64],
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (n, c, h, w) = x.nchw().unwrap();
    let (o, _, kk, _) = k.nchw().unwrap();
    let at = |bi: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((bi * c + ci) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = Vec::new();
    for bi in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oi];
                    for ci in 0..c {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let y = (oy * stride + ky) as isize - pad_top as isize;
                                let xx = (ox * stride + kx) as isize - pad_left as isize;
                                s += k.data()[((oi * c + ci) * kk + ky) * kk + kx]
                                    * at(bi, ci, y, xx);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn conv_once(x: Tensor, k: Tensor, b: Tensor, stride: usize, padding: Padding) -> Tensor {
    let mut tape = Tape::new();
    let (x, k, b) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
    let y = tape.conv2d(x, k, b, stride, padding).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 1, 5, 4], &mut rng);
    let y = conv_once(
        x.clone(),
        Tensor::full([1, 1, 1, 1], 1.0),
        Tensor::zeros([1]),
        1,
        Padding::Same,
    );
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = conv_once(
        random(&[1, 3, 6, 6], &mut rng),
        Tensor::zeros([4, 3, 3, 3]),
        Tensor::zeros([4]),
        1,
        Padding::Same,
    );
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_all_ones_on_2x2() {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let k = Tensor::full([1, 1, 3, 3], 1.0);
    let oracle = conv_oracle(&x, &k, &[0.0], 1, 1, 1, 2, 2);
    assert_eq!(oracle, vec![10.0; 4]);
    let y = conv_once(x, k, Tensor::zeros([1]), 1, Padding::Same);
    assert_eq!(y.data(), &oracle[..]);
}

#[test]
fn conv_matches_direct_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(h, w, stride) in &[(5, 7, 1), (6, 6, 2), (7, 5, 2), (8, 4, 1)] {
        let x = random(&[2, 3, h, w], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv_once(x.clone(), k.clone(), b.clone(), stride, Padding::Same);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        assert_eq!(y.shape(), &[2, 4, oh, ow]);
        let ph = ((oh - 1) * stride + 3).saturating_sub(h) / 2;
        let pw = ((ow - 1) * stride + 3).saturating_sub(w) / 2;
        let oracle = conv_oracle(&x, &k, b.data(), stride, ph, pw, oh, ow);
        for (a, o) in y.data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
        // valid padding
        let y = conv_once(x.clone(), k.clone(), b.clone(), stride, Padding::Valid);
        let (oh, ow) = ((h - 3) / stride + 1, (w - 3) / stride + 1);
        let oracle = conv_oracle(&x, &k, b.data(), stride, 0, 0, oh, ow);
        assert_eq!(y.shape(), &[2, 4, oh, ow]);
        for (a, o) in y.data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([1, 2, 4, 4]));
    let k = tape.leaf(Tensor::zeros([3, 1, 3, 3]));
    let b = tape.leaf(Tensor::zeros([3]));
    match tape.conv2d(x, k, b, 1, Padding::Same) {
        Err(GlrError::Config(msg)) => assert!(
            msg.contains("1 input channels") && msg.contains("2"),
            "{msg}"
        ),
        other => panic!("unexpected {other:?}"),
    }
    let k2 = tape.leaf(Tensor::zeros([3, 2, 2, 2]));
    assert!(tape.conv2d(x, k2, b, 1, Padding::Same).is_err());
}

fn tconv_once(x: Tensor, k: Tensor, b: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, k, b) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
    let y = tape.conv_transpose2d(x, k, b).unwrap();
    tape.value(y).clone()
}

#[test]
fn tconv_single_tap_and_zero() {
    let y = tconv_once(
        Tensor::new([1, 1, 1, 1], vec![2.5]).unwrap(),
        Tensor::full([1, 1, 2, 2], 1.0),
        Tensor::zeros([1]),
    );
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[2.5; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = tconv_once(
        Tensor::zeros([1, 2, 3, 3]),
        random(&[2, 3, 2, 2], &mut rng),
        Tensor::zeros([3]),
    );
    assert_eq!(y.shape(), &[1, 3, 6, 6]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn tconv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // kernel 2 without padding, and kernel 4 with padding 1
    for &(k, pad) in &[(2usize, 0usize), (4, 1)] {
        let w = random(&[3, 2, k, k], &mut rng); // conv: 2 -> 3 channels; tconv: 3 -> 2
        let x = random(&[1, 2, 8, 6], &mut rng);
        let y = random(&[1, 3, 4, 3], &mut rng);
        let cx = conv_oracle(&x, &w, &[0.0; 3], 2, pad, pad, 4, 3);
        let ty = tconv_once(y.clone(), w, Tensor::zeros([2]));
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs = x.dot(&ty);
        assert!((lhs - rhs).abs() < 1e-10, "k={k}: {lhs} vs {rhs}");
    }
}

#[test]
fn relu_forward_backward() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.reverse_pass(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.5, 3.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.5, 3.0]);
}

#[test]
fn max_pool_values_and_ties() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.max_pool_2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([1, 1, 4, 4], 0.7));
    let y = tape.max_pool_2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.7; 4]);
    let s = tape.sum(y);
    tape.reverse_pass(s).unwrap();
    let g = tape.grad(x).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let expected = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(g[r * 4 + c], expected);
        }
    }
}

#[test]
fn max_pool_floor_sizing() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([1, 2, 26, 26]));
    let y = tape.max_pool_2x2(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 13, 13]);
    let z = tape.max_pool_2x2(y).unwrap();
    assert_eq!(tape.shape(z), &[1, 2, 6, 6]);
}

#[test]
fn linear_cases() {
    let eval = |x: Vec<f64>, w: Tensor, b: Vec<f64>| {
        let mut tape = Tape::new();
        let n = x.len();
        let x = tape.leaf(Tensor::new([1, n], x).unwrap());
        let w = tape.leaf(w);
        let b = tape.leaf(Tensor::from_vec(b));
        let y = tape.linear(x, w, b).unwrap();
        tape.value(y).data().to_vec()
    };
    let x = vec![0.3, -1.0, 2.0];
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    assert_eq!(
        eval(x.clone(), Tensor::new([3, 3], eye).unwrap(), vec![0.0; 3]),
        x
    );
    assert_eq!(
        eval(x.clone(), Tensor::zeros([2, 3]), vec![4.0, -1.0]),
        vec![4.0, -1.0]
    );

    let w = vec![0.5, -0.2, 0.1, 1.5, 0.0, -0.3];
    let got = eval(
        x.clone(),
        Tensor::new([2, 3], w.clone()).unwrap(),
        vec![0.1, 0.2],
    );
    let hand = [
        0.1 + 0.5 * 0.3 + 0.2 + 0.1 * 2.0,
        0.2 + 1.5 * 0.3 + -0.3 * 2.0,
    ];
    for (a, b) in got.iter().zip(hand) {
        assert!((a - b).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([1, 4]));
    let w = tape.leaf(Tensor::zeros([2, 3]));
    let b = tape.leaf(Tensor::zeros([2]));
    assert!(tape.linear(x, w, b).is_err());
}

#[test]
fn sum_and_half_square_gradients() {
    let data = vec![0.5, -2.0, 3.25];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(data.clone()));
    let s = tape.sum(x);
    tape.reverse_pass(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 3]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(data.clone()));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.reverse_pass(half).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &data[..]);
}

#[test]
fn reverse_pass_usage_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.reverse_pass(x), Err(GlrError::Usage(_))));
    let s = tape.sum(x);
    tape.reverse_pass(s).unwrap();
    assert!(matches!(tape.reverse_pass(s), Err(GlrError::Usage(_))));
}

#[test]
fn shared_parameter_accumulates() {
    let mut params = ModelParams::new();
    params.insert("w", Tensor::from_vec(vec![2.0])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&params, "w").unwrap();
    let b = tape.param(&params, "w").unwrap();
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p);
    tape.reverse_pass(s).unwrap();
    assert_eq!(tape.param_grads().unwrap().get("w").unwrap(), &[4.0]);
}

/// conv(s2) -> relu -> conv -> tconv -> concat -> conv -> pool -> linear -> mse
fn small_net_loss(params: &ModelParams, input: &Tensor, target: &Tensor) -> (f64, Var, Tape, Var) {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let p = |t: &mut Tape, n: &str| t.param(params, n).unwrap();
    let (w1, b1) = (p(&mut tape, "c1.w"), p(&mut tape, "c1.b"));
    let h = tape.conv2d(x, w1, b1, 2, Padding::Same).unwrap();
    let h = tape.relu(h);
    let (w2, b2) = (p(&mut tape, "c2.w"), p(&mut tape, "c2.b"));
    let h2 = tape.conv2d(h, w2, b2, 1, Padding::Same).unwrap();
    let (wt, bt) = (p(&mut tape, "t.w"), p(&mut tape, "t.b"));
    let up = tape.conv_transpose2d(h2, wt, bt).unwrap();
    let cat = tape.concat_channels(up, x).unwrap();
    let (w3, b3) = (p(&mut tape, "c3.w"), p(&mut tape, "c3.b"));
    let h3 = tape.conv2d(cat, w3, b3, 1, Padding::Same).unwrap();
    let h3 = tape.relu(h3);
    let pooled = tape.max_pool_2x2(h3).unwrap();
    let n = tape.value(pooled).numel();
    let flat = tape.reshape(pooled, [1, n]).unwrap();
    let (wf, bf) = (p(&mut tape, "fc.w"), p(&mut tape, "fc.b"));
    let out = tape.linear(flat, wf, bf).unwrap();
    let loss = tape.mse(out, target).unwrap();
    let value = tape.value(loss).data()[0];
    (value, loss, tape, x)
}

fn small_net_params(rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::new();
    for (name, shape) in [
        ("c1.w", vec![3, 2, 3, 3]),
        ("c1.b", vec![3]),
        ("c2.w", vec![3, 3, 3, 3]),
        ("c2.b", vec![3]),
        ("t.w", vec![3, 2, 2, 2]),
        ("t.b", vec![2]),
        ("c3.w", vec![2, 4, 3, 3]),
        ("c3.b", vec![2]),
        ("fc.w", vec![3, 18]),
        ("fc.b", vec![3]),
    ] {
        p.insert(name, random(&shape, rng)).unwrap();
    }
    p
}

#[test]
fn small_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = small_net_params(&mut rng);
    let input = random(&[1, 2, 6, 6], &mut rng);
    let target = random(&[1, 3], &mut rng);

    let (_, loss, mut tape, x) = small_net_loss(&params, &input, &target);
    tape.reverse_pass(loss).unwrap();
    let grads = tape.param_grads().unwrap();

    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        let base = params.get(&name).unwrap().data().to_vec();
        let idx: Vec<usize> = (0..base.len()).collect();
        let fd = central_difference(
            |v| {
                let mut q = params.clone();
                q.set_data(&name, v).unwrap();
                small_net_loss(&q, &input, &target).0
            },
            &base,
            &idx,
            1e-6,
        );
        let err = relative_error(grads.get(&name).unwrap(), &fd);
        assert!(err < 1e-5, "{name}: relative error {err}");
    }

    let idx: Vec<usize> = (0..input.numel()).collect();
    let fd = central_difference(
        |v| {
            small_net_loss(
                &params,
                &Tensor::new(input.shape().to_vec(), v.to_vec()).unwrap(),
                &target,
            )
            .0
        },
        input.data(),
        &idx,
        1e-6,
    );
    let err = relative_error(tape.grad(x).unwrap(), &fd);
    assert!(err < 1e-5, "input: relative error {err}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = small_net_params(&mut rng);
        let input = random(&[1, 2, 6, 6], &mut rng);
        let target = random(&[1, 3], &mut rng);
        let (v, loss, mut tape, _) = small_net_loss(&params, &input, &target);
        tape.reverse_pass(loss).unwrap();
        (v.to_bits(), tape.param_grads().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn extract_patches_backward_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let plan = Arc::new(plan_patches(9, 11, 4, 3).unwrap());
    let x = random(&[2, 2, 9, 11], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let p = tape.extract_patches(xv, plan.clone()).unwrap();
    assert_eq!(tape.shape(p), &[2 * plan.num_patches(), 2, 4, 4]);
    let y = random(tape.shape(p), &mut rng);
    let yv = tape.leaf(y.clone());
    let prod = tape.mul(p, yv).unwrap();
    let s = tape.sum(prod);
    tape.reverse_pass(s).unwrap();
    let lhs = tape.value(p).dot(&y);
    let rhs: f64 = x
        .data()
        .iter()
        .zip(tape.grad(xv).unwrap())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_adjoint_consistency(seed in any::<u64>(), h in 3usize..8, w in 3usize..8, stride in 1usize..3) {
        // <conv(x), y> = <x, conv^T(y)> where conv^T is the reverse pass
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, h, w], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let k = tape.leaf(random(&[3, 2, 3, 3], &mut rng));
        let b = tape.leaf(Tensor::zeros([3]));
        let out = tape.conv2d(xv, k, b, stride, Padding::Same).unwrap();
        let y = random(tape.shape(out), &mut rng);
        let yv = tape.leaf(y.clone());
        let prod = tape.mul(out, yv).unwrap();
        let s = tape.sum(prod);
        tape.reverse_pass(s).unwrap();
        let lhs = tape.value(out).dot(&y);
        let rhs: f64 = x.data().iter().zip(tape.grad(xv).unwrap()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn tconv_adjoint_consistency(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 3, h, w], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let k = tape.leaf(random(&[3, 2, 2, 2], &mut rng));
        let b = tape.leaf(Tensor::zeros([2]));
        let out = tape.conv_transpose2d(xv, k, b).unwrap();
        prop_assert_eq!(tape.shape(out), &[1, 2, 2 * h, 2 * w]);
        let y = random(tape.shape(out), &mut rng);
        let yv = tape.leaf(y.clone());
        let prod = tape.mul(out, yv).unwrap();
        let s = tape.sum(prod);
        tape.reverse_pass(s).unwrap();
        let lhs = tape.value(out).dot(&y);
        let rhs: f64 = x.data().iter().zip(tape.grad(xv).unwrap()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
