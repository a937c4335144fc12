//! Evaluation and verification utilities: image I/O, noise, metrics and
//! gradient checks.

pub mod blur;
pub mod fd;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod noise;
pub mod synth;

pub use self::image::{load_image, save_image, ImagePlane};
pub use blur::gaussian_blur;
pub use gradcheck::{gradcheck_suite, GradcheckReport};
pub use metrics::{mse, psnr, ssim, ssim_per_channel};
pub use noise::{add_awgn, NoiseSpec};
pub use synth::piecewise_smooth;
