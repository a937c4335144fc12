//! Additive white Gaussian noise.
//!
//! Samples come from `rand_distr::StandardNormal` (ziggurat) driven by a
//! `ChaCha8Rng` seeded with [`NoiseSpec::seed`], so the noise field depends
//! only on `(seed, sigma, extents)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{GlrError, Result};
use crate::harness::image::ImagePlane;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation on the 0-255 scale.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(GlrError::Config(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(NoiseSpec { sigma, seed })
    }
}

/// Adds i.i.d. `N(0, (sigma/255)^2)` noise. The result is not clipped.
pub fn add_awgn(plane: &ImagePlane, spec: NoiseSpec) -> ImagePlane {
    let mut out = plane.clone();
    if spec.sigma > 0.0 {
        add_awgn_in_place(
            out.data_mut(),
            spec.sigma,
            &mut ChaCha8Rng::seed_from_u64(spec.seed),
        );
    }
    out.provenance = format!(
        "{} + awgn(sigma={}, seed={})",
        plane.provenance, spec.sigma, spec.seed
    );
    out
}

pub(crate) fn add_awgn_in_place<R: Rng>(data: &mut [f64], sigma: f64, rng: &mut R) {
    let s = sigma / 255.0;
    for v in data {
        let z: f64 = rng.sample(StandardNormal);
        *v += s * z;
    }
}
