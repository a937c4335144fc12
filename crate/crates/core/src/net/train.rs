//! Training loop: synthetic AWGN on clean images, cascade forward, MSE on
//! the final output, full backward and Adam with a multi-step schedule.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_update, AdamState};
use crate::autodiff::Tape;
use crate::error::{GlrError, Result};
use crate::harness::image::{load_image, ImagePlane};
use crate::harness::noise::add_awgn_in_place;
use crate::net::block::cascade_forward;
use crate::net::config::{ExemplarMode, SigmaSpec, TrainConfig};
use crate::net::networks::init_params;
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Clean images listed one path per line, relative to the manifest's
/// directory. Blank lines and `#` comments are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImagePlane>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GlrError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let images = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| load_image(base.join(l)))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(GlrError::Data(format!(
            "{}: manifest lists no images",
            path.display()
        )));
    }
    Ok(images)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-image training losses over the epoch.
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} loss {:.10e} lr {:e}",
            self.epoch, self.loss, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs: Vec<EpochRecord>,
}

fn check_dataset(images: &[ImagePlane], cfg: &TrainConfig) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| GlrError::Data("training set is empty".into()))?;
    if let Some(bad) = images.iter().find(|im| !im.same_extents(first)) {
        return Err(GlrError::Data(format!(
            "training images must share extents: {} is {}x{}x{}, {} is {}x{}x{}",
            first.provenance,
            first.height(),
            first.width(),
            first.channels(),
            bad.provenance,
            bad.height(),
            bad.width(),
            bad.channels()
        )));
    }
    if first.channels() != cfg.net.channels {
        return Err(GlrError::Config(format!(
            "network expects {} channels, images have {}",
            cfg.net.channels,
            first.channels()
        )));
    }
    if cfg.cascade.mode != ExemplarMode::Learned {
        return Err(GlrError::Config(
            "classic mode has no parameters to train".into(),
        ));
    }
    Ok(())
}

/// Trains from freshly initialized parameters drawn from `cfg.seed`.
pub fn train(
    images: &[ImagePlane],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(&cfg.net, cfg.cascade.exemplars, cfg.cascade.patch, &mut rng)?;
    train_from(params, images, cfg, &mut rng, log)
}

/// Trains `params` in place of a fresh initialization; all sampling draws from `rng`.
pub fn train_from(
    mut params: ModelParams,
    images: &[ImagePlane],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(images, cfg)?;
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let per_image = c * h * w;
    let mut adam = AdamState::new(&params, cfg.learning_rate(1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.learning_rate(epoch);
        order.shuffle(rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let b = batch.len();
            let mut clean = Vec::with_capacity(b * per_image);
            for &i in batch {
                clean.extend_from_slice(images[i].data());
            }
            let mut noisy = clean.clone();
            for chunk in noisy.chunks_mut(per_image) {
                let sigma = match cfg.sigma {
                    SigmaSpec::Fixed(s) => s,
                    SigmaSpec::Range(lo, hi) => rng.random_range(lo..=hi),
                };
                add_awgn_in_place(chunk, sigma, rng);
            }
            let clean = Tensor::new([b, c, h, w], clean)?;
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new([b, c, h, w], noisy)?);
            let (out, stats) = cascade_forward(&mut tape, Some(&params), &cfg.cascade, x)?;
            let loss = tape.mse(out, &clean)?;
            let value = tape.value(loss).data()[0];
            let abort = |what: &str| GlrError::NonFiniteLoss {
                epoch,
                step,
                snapshot: format!(
                    "{what}; loss {value}, lr {}, batch {batch:?}, block stats {stats:?}",
                    adam.lr
                ),
            };
            if !value.is_finite() {
                return Err(abort("non-finite loss"));
            }
            tape.reverse_pass(loss)?;
            let grads = tape.param_grads()?;
            if !grads.is_finite() {
                return Err(abort("non-finite gradient"));
            }
            adam_update(&mut params, &grads, &mut adam)?;
            total += value * b as f64;
        }
        let record = EpochRecord {
            epoch,
            loss: total / images.len() as f64,
            lr: adam.lr,
        };
        log(&record);
        records.push(record);
    }
    Ok(TrainOutcome {
        params,
        adam,
        epochs: records,
    })
}
