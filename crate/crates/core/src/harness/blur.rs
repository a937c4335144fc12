//! Separable Gaussian blur with replicated borders.

/// Blurs an `h x w` plane with a Gaussian of standard deviation `sigma`
/// pixels, truncated at `ceil(3 sigma)`. Border pixels are replicated, so
/// constant planes are preserved exactly up to rounding.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane length does not match extents");
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * src[y * w + clamp(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[clamp(y as isize + j as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}
