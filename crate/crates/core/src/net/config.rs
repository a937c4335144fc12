//! Cascade, network and training configuration, including the plain-text
//! `key=value` training config format.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GlrError, Result};
use crate::graph::{SolveOptions, DEFAULT_KAPPA_MAX};
use crate::patch::{DEFAULT_PATCH, DEFAULT_STRIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExemplarMode {
    /// Exemplars, prefilter and `mu` come from the trainable networks.
    Learned,
    /// Identity prefilter, Gaussian-blurred input as exemplars, fixed global `mu`.
    Classic,
}

impl FromStr for ExemplarMode {
    type Err = GlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(ExemplarMode::Learned),
            "classic" => Ok(ExemplarMode::Classic),
            other => Err(GlrError::Config(format!(
                "mode must be `learned` or `classic`, got `{other}`"
            ))),
        }
    }
}

/// Standard deviation used when blurring the input into classic-mode exemplars.
pub const CLASSIC_BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Number of blocks `T`, all sharing one parameter set.
    pub cascades: usize,
    pub patch: usize,
    pub stride: usize,
    pub kappa_max: f64,
    /// Exemplar count `N` in learned mode. Classic mode uses one per channel.
    pub exemplars: usize,
    pub mode: ExemplarMode,
    /// Global `mu` in classic mode.
    pub mu: f64,
    /// Edge kernel bandwidth `2 eps^2`.
    pub epsilon2x: f64,
    pub solve: SolveOptions,
    /// Process patches in a fixed serial order.
    pub deterministic: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            cascades: 2,
            patch: DEFAULT_PATCH,
            stride: DEFAULT_STRIDE,
            kappa_max: DEFAULT_KAPPA_MAX,
            exemplars: 3,
            mode: ExemplarMode::Learned,
            mu: 4.0,
            epsilon2x: 1.0,
            solve: SolveOptions::default(),
            deterministic: true,
        }
    }
}

impl CascadeConfig {
    pub fn classic(mu: f64, epsilon2x: f64) -> Self {
        CascadeConfig {
            cascades: 1,
            mode: ExemplarMode::Classic,
            mu,
            epsilon2x,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlrError::Config(m));
        if self.cascades == 0 {
            return fail("cascades must be at least 1".into());
        }
        if !(self.kappa_max > 1.0) {
            return fail(format!("kappa_max must exceed 1, got {}", self.kappa_max));
        }
        if self.exemplars == 0 {
            return fail("exemplars must be at least 1".into());
        }
        if self.patch < 2 || self.stride == 0 || self.stride > self.patch {
            return fail(format!(
                "patch {} / stride {} must satisfy 1 <= stride <= patch, patch >= 2",
                self.patch, self.stride
            ));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return fail(format!("mu must be finite and >= 0, got {}", self.mu));
        }
        if !(self.epsilon2x > 0.0 && self.epsilon2x.is_finite()) {
            return fail(format!(
                "epsilon2x must be positive, got {}",
                self.epsilon2x
            ));
        }
        Ok(())
    }
}

/// Layer widths of the three sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Image channels (1 or 3).
    pub channels: usize,
    /// Exemplar network widths at full, half and quarter resolution.
    pub f_widths: [usize; 3],
    pub prefilter_width: usize,
    /// Convolution widths of the two stages before each pooling step.
    pub mu_widths: [usize; 2],
    pub mu_hidden: usize,
    /// Initial bias of the final `mu` layer, so the output ReLU starts active.
    pub mu_bias_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 1,
            f_widths: [16, 32, 64],
            prefilter_width: 16,
            mu_widths: [8, 16],
            mu_hidden: 32,
            mu_bias_init: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSpec {
    Fixed(f64),
    /// Blind training: one `sigma` per image, uniform over `[min, max]`.
    Range(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub cascade: CascadeConfig,
    pub net: NetConfig,
    pub sigma: SigmaSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<f64>,
    /// 1-based epochs at which `lr_schedule[i + 1]` takes over.
    pub lr_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cascade: CascadeConfig::default(),
            net: NetConfig::default(),
            sigma: SigmaSpec::Fixed(25.0),
            epochs: 200,
            batch_size: 4,
            lr_schedule: vec![1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6],
            lr_epochs: vec![2, 5, 20, 50, 150],
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| GlrError::Config(format!("`{key}`: cannot parse `{value}`")))
}

/// Comma-separated values; an empty value is an empty list.
fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn parse_array<const K: usize>(key: &str, value: &str) -> Result<[usize; K]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| GlrError::Config(format!("`{key}` needs exactly {K} comma-separated values")))
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let idx = self.lr_epochs.iter().take_while(|&&e| epoch >= e).count();
        self.lr_schedule[idx.min(self.lr_schedule.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        let fail = |m: String| Err(GlrError::Config(m));
        if self.net.channels != 1 && self.net.channels != 3 {
            return fail(format!(
                "channels must be 1 or 3, got {}",
                self.net.channels
            ));
        }
        match self.sigma {
            SigmaSpec::Fixed(s) if !(s >= 0.0) => {
                return fail(format!("sigma must be >= 0, got {s}"))
            }
            SigmaSpec::Range(a, b) if !(a >= 0.0 && b >= a) => {
                return fail(format!("sigma range [{a}, {b}] is empty or negative"))
            }
            _ => {}
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if self.lr_schedule.is_empty() || self.lr_schedule.iter().any(|&r| !(r >= 0.0)) {
            return fail("lr_schedule needs at least one nonnegative rate".into());
        }
        if self.lr_epochs.len() + 1 != self.lr_schedule.len() {
            return fail(format!(
                "lr_epochs needs {} boundaries for {} rates, got {}",
                self.lr_schedule.len() - 1,
                self.lr_schedule.len(),
                self.lr_epochs.len()
            ));
        }
        if self.lr_epochs.windows(2).any(|w| w[0] >= w[1]) || self.lr_epochs.first() == Some(&0) {
            return fail("lr_epochs must be strictly increasing and >= 1".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let (mut sigma_min, mut sigma_max) = (None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GlrError::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let c = &mut cfg.cascade;
            match key {
                "sigma" => cfg.sigma = SigmaSpec::Fixed(parse_num(key, value)?),
                "sigma_min" => sigma_min = Some(parse_num(key, value)?),
                "sigma_max" => sigma_max = Some(parse_num(key, value)?),
                "cascades" => c.cascades = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "lr_schedule" => cfg.lr_schedule = parse_list(key, value)?,
                "lr_epochs" => cfg.lr_epochs = parse_list(key, value)?,
                "kappa_max" => c.kappa_max = parse_num(key, value)?,
                "patch" => c.patch = parse_num(key, value)?,
                "stride" => c.stride = parse_num(key, value)?,
                "exemplars" => c.exemplars = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "mode" => c.mode = value.parse()?,
                "mu" => c.mu = parse_num(key, value)?,
                "epsilon2x" => c.epsilon2x = parse_num(key, value)?,
                "channels" => cfg.net.channels = parse_num(key, value)?,
                "f_widths" => cfg.net.f_widths = parse_array(key, value)?,
                "prefilter_width" => cfg.net.prefilter_width = parse_num(key, value)?,
                "mu_widths" => cfg.net.mu_widths = parse_array(key, value)?,
                "mu_hidden" => cfg.net.mu_hidden = parse_num(key, value)?,
                other => {
                    return Err(GlrError::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        match (sigma_min, sigma_max) {
            (Some(a), Some(b)) => cfg.sigma = SigmaSpec::Range(a, b),
            (None, None) => {}
            _ => {
                return Err(GlrError::Config(
                    "sigma_min and sigma_max must be given together".into(),
                ))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GlrError::io(path, e))?;
        Self::parse(&text)
    }
}
