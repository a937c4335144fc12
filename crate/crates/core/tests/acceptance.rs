//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use glr_core::graph::{
    assemble_laplacian, clamp_mu, compute_edge_weights, condition_number_estimate, dense_solve,
    lambda_max_estimate, regularizer_value, solve_qp, ExemplarPatch, SolveOptions,
};
use glr_core::harness::gradcheck::{qp_instance_check, two_vertex_grad_mu, COMPONENT_THRESHOLD};
use glr_core::harness::{
    add_awgn, load_image, piecewise_smooth, psnr, ssim, ImagePlane, NoiseSpec,
};
use glr_core::net::{
    classic_grid_search, denoise, init_params, train, CascadeConfig, EpochRecord, NetConfig,
    TrainConfig,
};
use glr_core::patch::{aggregate_patches, extract_patches, plan_patches};
use glr_core::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KAPPA_MAX: f64 = 250.0;

type Check = fn() -> Result<Outcome>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn gradient_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let c = qp_instance_check(6, 2, &mut rng)?;
        for (w, v) in worst
            .iter_mut()
            .zip([c.mu, c.rhs, c.edge_weights, c.features])
        {
            *w = w.max(v);
        }
    }
    let two = two_vertex_grad_mu()?;
    let two_err = (two + 1.0 / 27.0).abs();
    let elapsed = start.elapsed();
    outcome(
        worst.iter().all(|&w| w < COMPONENT_THRESHOLD)
            && two_err <= 1e-10
            && elapsed < Duration::from_secs(60),
        format!(
            "max rel err mu {:.2e} rhs {:.2e} w {:.2e} f {:.2e} (< 1e-5); two-vertex {two:.12} (err {two_err:.1e}); {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            elapsed.as_secs_f64()
        ),
    )
}

fn random_patch(side: usize, n: usize, rng: &mut impl Rng) -> Result<ExemplarPatch> {
    let scale = rng.random_range(0.05..2.0);
    let features = (0..n)
        .map(|_| uniform(side * side, 0.0, scale, rng))
        .collect();
    ExemplarPatch::new(side, features)
}

fn conditioning_bound() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut worst_kappa, mut clamped) = (f64::NEG_INFINITY, 0.0f64, 0);
    let mut max_eig_err = 0.0f64;
    for k in 0..200 {
        let ex = random_patch(26, 3, &mut rng)?;
        let lap = Arc::new(assemble_laplacian(&compute_edge_weights(&ex, 1.0)?));
        let mu = rng.random_range(0.0..100.0);
        let bound = 1.0 + 2.0 * mu * lap.d_max();
        let lmax = lambda_max_estimate(&lap, mu, 300, k);
        worst_gap = worst_gap.max(lmax - bound);
        if k < 4 {
            // Dense eigenvalues as an oracle for the power iteration itself.
            let n = lap.num_vertices();
            let dense = lap.to_dense();
            let m = DMatrix::from_fn(n, n, |i, j| {
                mu * dense[i][j] + if i == j { 1.0 } else { 0.0 }
            });
            let top = m.symmetric_eigenvalues().max();
            max_eig_err = max_eig_err.max((top - lmax).abs() / top);
        }
        let c = clamp_mu(mu, &lap, KAPPA_MAX)?;
        clamped += usize::from(c.clamped);
        worst_kappa = worst_kappa.max(condition_number_estimate(&lap, c.value, 300, k)?);
    }
    let elapsed = start.elapsed();
    outcome(
        worst_gap <= 1e-8
            && worst_kappa <= KAPPA_MAX
            && max_eig_err < 1e-3
            && elapsed < Duration::from_secs(60),
        format!(
            "max lambda_max - (1 + 2 mu d_max) = {worst_gap:.3e}; max kappa after clamp {worst_kappa:.3} ({clamped}/200 clamped); power vs dense eig rel {max_eig_err:.1e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn solver_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut max_diff, mut max_mean, mut smoothing_ok) = (0.0f64, 0.0f64, true);
    let mut largest = 0;
    for _ in 0..100 {
        let side = rng.random_range(2..=10);
        let n = rng.random_range(1..=3);
        let ex = random_patch(side, n, &mut rng)?;
        let e2 = rng.random_range(0.1..2.0);
        let lap = Arc::new(assemble_laplacian(&compute_edge_weights(&ex, e2)?));
        let mu = clamp_mu(rng.random_range(0.0..10.0), &lap, KAPPA_MAX)?;
        let y = uniform(side * side, 0.0, 1.0, &mut rng);
        let x = solve_qp(&lap, mu, &y, SolveOptions::default())?.into_solution();
        let exact = dense_solve(&lap, mu.value, &y);
        for (a, b) in x.iter().zip(&exact) {
            max_diff = max_diff.max((a - b).abs());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        max_mean = max_mean.max((mean(&x) - mean(&y)).abs());
        smoothing_ok &= regularizer_value(&lap, &x) <= regularizer_value(&lap, &y);
        largest = largest.max(side * side);
    }
    outcome(
        max_diff <= 1e-8 && max_mean <= 1e-9 && smoothing_ok,
        format!(
            "CG vs dense max abs {max_diff:.2e} (<= 1e-8); mean shift {max_mean:.2e} (<= 1e-9); x'Lx <= y'Ly on all: {smoothing_ok}; m <= {largest}"
        ),
    )
}

fn classic_denoising() -> Result<Outcome> {
    let clean = load_image(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/cameraman_180.pgm"
    ))?;
    let noisy = add_awgn(&clean, NoiseSpec::new(25.0, 25)?);
    let before = psnr(&clean, &noisy)?;
    let base = CascadeConfig::classic(1.0, 1.0);
    let mus = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
    let eps = [0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 1.0];
    let (mu, e2, after) = classic_grid_search(&clean, &noisy, &base, &mus, &eps)?;
    outcome(
        after - before >= 1.0,
        format!(
            "noisy {before:.3} dB -> {after:.3} dB (gain {:.3} dB, need >= 1) at mu {mu}, 2eps^2 {e2}",
            after - before
        ),
    )
}

fn trainability() -> Result<Outcome> {
    let start = Instant::now();
    let images: Vec<ImagePlane> = (0..20).map(|s| piecewise_smooth(64, 64, s)).collect();
    let cfg = TrainConfig {
        epochs: 10,
        sigma: glr_core::net::SigmaSpec::Fixed(25.0),
        cascade: CascadeConfig {
            cascades: 2,
            ..CascadeConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    let out = train(&images, &cfg, &mut |r: &EpochRecord| losses.push(r.loss))?;
    let elapsed = start.elapsed();
    let drop = 1.0 - losses[9] / losses[0];

    let mut worst_gain = f64::INFINITY;
    let mut gains = Vec::new();
    for i in 0..5 {
        let clean = piecewise_smooth(64, 64, 1000 + i);
        let noisy = add_awgn(&clean, NoiseSpec::new(25.0, 2000 + i)?);
        let den = denoise(Some(&out.params), &cfg.cascade, &noisy)?;
        let gain = psnr(&clean, &den)? - psnr(&clean, &noisy)?;
        worst_gain = worst_gain.min(gain);
        gains.push(format!("{gain:+.2}"));
    }
    outcome(
        elapsed < Duration::from_secs(30 * 60) && drop >= 0.2 && worst_gain > 0.0,
        format!(
            "loss {:.4e} -> {:.4e} (drop {:.1}%, need >= 20%); held-out PSNR gain dB [{}]; {:.0}s",
            losses[0],
            losses[9],
            100.0 * drop,
            gains.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn pipeline_invariants() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut round_trip = true;
    for (h, w) in [(180, 180), (64, 64), (50, 50), (26, 70), (97, 41)] {
        let plan = plan_patches(h, w, 26, 22)?;
        let plane = uniform(h * w, -1.0, 2.0, &mut rng);
        round_trip &= aggregate_patches(&extract_patches(&plane, &plan)?, &plan)? == plane;
    }

    let flat = ImagePlane::filled(64, 64, 0.42);
    let mut fixed_err = 0.0f64;
    let classic = CascadeConfig {
        cascades: 2,
        ..CascadeConfig::classic(8.0, 0.01)
    };
    let mut prng = ChaCha8Rng::seed_from_u64(7);
    let params = init_params(&NetConfig::default(), 3, 26, &mut prng)?;
    let learned = CascadeConfig::default();
    for out in [
        denoise(None, &classic, &flat)?,
        denoise(Some(&params), &learned, &flat)?,
    ] {
        for v in out.data() {
            fixed_err = fixed_err.max((v - 0.42).abs());
        }
    }

    let noisy = add_awgn(&piecewise_smooth(64, 64, 8), NoiseSpec::new(25.0, 9)?);
    let again = add_awgn(&piecewise_smooth(64, 64, 8), NoiseSpec::new(25.0, 9)?);
    let rerun_denoise = noisy == again
        && denoise(Some(&params), &learned, &noisy)?.data()
            == denoise(Some(&params), &learned, &again)?.data();
    let small = TrainConfig {
        epochs: 2,
        net: NetConfig {
            f_widths: [4, 6, 8],
            prefilter_width: 4,
            mu_widths: [3, 4],
            mu_hidden: 6,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    };
    let data: Vec<ImagePlane> = (0..4).map(|s| piecewise_smooth(32, 32, 50 + s)).collect();
    let run = || -> Result<_> {
        let mut log = Vec::new();
        let out = train(&data, &small, &mut |r: &EpochRecord| {
            log.push(r.to_string())
        })?;
        Ok((out.params, log))
    };
    let rerun_train = run()? == run()?;

    outcome(
        round_trip && fixed_err <= 1e-9 && rerun_denoise && rerun_train,
        format!(
            "patch round trip exact: {round_trip}; constant fixed point max err {fixed_err:.1e}; bit-identical denoise {rerun_denoise}, training {rerun_train}"
        ),
    )
}

/// Direct SSIM: explicit 11x11 Gaussian window and two-pass moments per window.
fn ssim_direct(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (u, row) in win.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *cell = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
            total += *cell;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (x, y) = (a.data(), b.data());
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let at = |u: usize, v: usize| (r + u) * w + c + v;
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    mx += win[u][v] / total * x[at(u, v)];
                    my += win[u][v] / total * y[at(u, v)];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let g = win[u][v] / total;
                    let (dx, dy) = (x[at(u, v)] - mx, y[at(u, v)] - my);
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cov += g * dx * dy;
                }
            }
            sum += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn metric_fixtures() -> Result<Outcome> {
    let base = ImagePlane::filled(32, 32, 0.4);
    let shifted = ImagePlane::filled(32, 32, 0.4 + 25.0 / 255.0);
    let p = psnr(&base, &shifted)?;

    let clean = piecewise_smooth(32, 32, 77);
    let noisy = add_awgn(&clean, NoiseSpec::new(25.0, 78)?);
    let identity = ssim(&clean, &clean)?;
    let ours = ssim(&clean, &noisy)?;
    let direct = ssim_direct(&clean, &noisy);
    outcome(
        (p - 20.17).abs() <= 0.01 && identity == 1.0 && (ours - direct).abs() <= 1e-6,
        format!(
            "PSNR {p:.4} dB (20.17 +- 0.01); SSIM(identical) = {identity}; SSIM {ours:.9} vs direct {direct:.9} (diff {:.1e})",
            (ours - direct).abs()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("conditioning bound", conditioning_bound),
        ("solver oracle", solver_oracle),
        ("classic-mode denoising", classic_denoising),
        ("desk-scale trainability", trainability),
        ("pipeline invariants", pipeline_invariants),
        ("metric fixtures", metric_fixtures),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (passed, detail) = match check() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!(
            "criterion {} {name}: {} | {detail}",
            i + 1,
            if passed { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
