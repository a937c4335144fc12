//! Seeded piecewise-smooth grayscale images used as a synthetic training set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::image::ImagePlane;

/// A smooth background ramp overlaid with random rectangles and ellipses,
/// each carrying its own gentle intensity gradient. Values stay in `[0.05, 0.95]`.
pub fn piecewise_smooth(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let ramp = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(0.2..0.8),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        )
    };
    let (b0, by, bx) = ramp(&mut rng);
    let mut data: Vec<f64> = (0..height * width)
        .map(|i| b0 + by * ((i / width) as f64 / hf - 0.5) + bx * ((i % width) as f64 / wf - 0.5))
        .collect();

    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let cy = rng.random_range(0.0..hf);
        let cx = rng.random_range(0.0..wf);
        let ry = rng.random_range(0.08..0.35) * hf;
        let rx = rng.random_range(0.08..0.35) * wf;
        let ellipse = rng.random_bool(0.5);
        let (v0, vy, vx) = ramp(&mut rng);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    data[y * width + x] = v0 + 0.5 * (vy * dy + vx * dx);
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.05, 0.95));
    ImagePlane::gray(height, width, data)
        .expect("valid extents")
        .with_provenance(format!("piecewise_smooth({height}x{width}, seed={seed})"))
}
