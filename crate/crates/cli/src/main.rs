//! `glr`: corrupt, train, denoise, evaluate and gradient-check from the shell.
//!
//! Exit status is 0 on success, 1 when the operation fails and 2 on usage
//! errors.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use glr_core::harness::{
    add_awgn, gradcheck_suite, load_image, psnr, save_image, ssim_per_channel, NoiseSpec,
};
use glr_core::net::{
    denoise, load_manifest, load_model, save_model, train, CascadeConfig, EpochRecord, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "glr",
    version,
    about = "Graph Laplacian regularized image denoising"
)]
struct Cli {
    /// Seed for every random draw; `train` falls back to the config's `seed`
    /// key when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Process patches in a fixed order. Pass `--deterministic false` to
    /// solve them in parallel.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add white Gaussian noise to an image.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Standard deviation on the 0-255 scale.
        #[arg(long)]
        sigma: f64,
    },
    /// Train a model on the clean images listed in a manifest.
    Train {
        /// Manifest with one image path per line, relative to the manifest.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        /// Epoch log destination; standard output when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Denoise an image with a trained model or the untrained classic pipeline.
    Denoise(DenoiseArgs),
    /// Print PSNR and SSIM of a test image against a reference.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long, required_unless_present = "classic", conflicts_with = "classic")]
    model: Option<PathBuf>,
    /// Blurred-input exemplars with a constant `mu`.
    #[arg(long, requires = "mu")]
    classic: bool,
    #[arg(long, conflicts_with = "model")]
    mu: Option<f64>,
    /// Bandwidth `2 eps^2` of the edge weights.
    #[arg(long)]
    epsilon2x: Option<f64>,
    #[arg(long)]
    cascades: Option<usize>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Corrupt { input, out, sigma } => {
            let clean = load_image(&input)?;
            let noisy = add_awgn(&clean, NoiseSpec::new(sigma, cli.seed.unwrap_or(0))?);
            save_image(&noisy, &out)?;
        }
        Command::Train {
            data,
            config,
            out_model,
            log,
        } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.cascade.deterministic = cli.deterministic;
            let images = load_manifest(&data)?;
            let mut sink: Box<dyn Write> = match &log {
                Some(path) => Box::new(BufWriter::new(
                    File::create(path).with_context(|| format!("creating {}", path.display()))?,
                )),
                None => Box::new(io::stdout().lock()),
            };
            let mut write_err = None;
            let outcome = train(&images, &cfg, &mut |r: &EpochRecord| {
                if let Err(e) = writeln!(sink, "{r}").and_then(|()| sink.flush()) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing training log");
            }
            save_model(&out_model, &outcome.params, &cfg.net, &cfg.cascade)?;
        }
        Command::Denoise(args) => denoise_cmd(args, cli.deterministic)?,
        Command::Eval { reference, test } => {
            let a = load_image(&reference)?;
            let b = load_image(&test)?;
            let p = psnr(&a, &b)?;
            let per = ssim_per_channel(&a, &b)?;
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            println!("PSNR: {p:.4} dB");
            println!("SSIM: {mean:.4}");
            if per.len() == 3 {
                for (name, v) in ["R", "G", "B"].iter().zip(&per) {
                    println!("SSIM {name}: {v:.4}");
                }
            }
        }
        Command::Gradcheck => {
            let report = gradcheck_suite(cli.seed.unwrap_or(0))?;
            print!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn denoise_cmd(args: DenoiseArgs, deterministic: bool) -> Result<()> {
    let noisy = load_image(&args.input)?;
    let (params, mut cfg) = match &args.model {
        Some(path) => {
            let (params, net, cfg) = load_model(path)?;
            if net.channels != noisy.channels() {
                bail!(
                    "model expects {} channel(s), {} has {}",
                    net.channels,
                    args.input.display(),
                    noisy.channels()
                );
            }
            (Some(params), cfg)
        }
        None => {
            let mu = args.mu.context("--classic needs --mu")?;
            let e2 = args.epsilon2x.unwrap_or(CascadeConfig::default().epsilon2x);
            (None, CascadeConfig::classic(mu, e2))
        }
    };
    if let Some(e2) = args.epsilon2x {
        cfg.epsilon2x = e2;
    }
    if let Some(t) = args.cascades {
        cfg.cascades = t;
    }
    cfg.deterministic = deterministic;
    let out = denoise(params.as_ref(), &cfg, &noisy)?;
    save_image(&out, &args.out)?;
    Ok(())
}
