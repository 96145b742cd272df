//! `uqgan`: train, apply and evaluate ultrasound enhancement GANs.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use uqgan_core::data::{load_pair_manifest, preprocess, save_plane_png};
use uqgan_core::metrics::evaluate_set;
use uqgan_core::networks::{Enhancer, IdentityEnhancer};
use uqgan_core::trainer::{load_enhancer, train, TrainLog, TrainState, VAL_LOG_FILE};
use uqgan_core::{Error, ErrorClass};

use crate::config::{RunConfig, EXTRACTOR_WEIGHTS_ENV};

#[derive(Parser, Debug)]
#[command(name = "uqgan", version, about = "Paired cycle-consistent GAN for ultrasound image enhancement")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Flat `key = value` config file; `#` starts a comment
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable); wins over the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Random seed; shorthand for `--set seed=N`
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory (train: logs and checkpoints; evaluate: report; plot: charts)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Checkpoint to resume from (train) or to load G_H from (enhance, evaluate)
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Dataset root holding `low/` and `high/` PNG folders
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Only log warnings and errors
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both generators and discriminators
    Train,
    /// Enhance every PNG in a folder with G_H from a checkpoint
    Enhance {
        /// Folder of low-quality PNG images
        input_dir: PathBuf,
        /// Folder the enhanced images are written to, under the same names
        output_dir: PathBuf,
    },
    /// Score G_H on every pair of a dataset and write a CSV report
    Evaluate {
        /// Report path [default: <out>/report.csv]
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
        /// Score the low images unchanged instead of loading a checkpoint
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
    },
    /// Draw validation LNCC/SSI/PSNR curves from a training log
    Plot {
        /// `val_log.csv` or the training output folder containing it
        log: PathBuf,
    },
}

impl Cli {
    fn run_config(&self) -> uqgan_core::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.common.config {
            cfg.apply_file(path)?;
        }
        for spec in &self.common.overrides {
            cfg.apply_override(spec)?;
        }
        if let Some(seed) = self.common.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.common.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.common.data {
            cfg.data_root = Some(data.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_root(cfg: &RunConfig) -> anyhow::Result<&Path> {
    match &cfg.data_root {
        Some(p) => Ok(p),
        None => Err(Error::Config("no dataset given (use --data or `data_root`)".into()).into()),
    }
}

fn cmd_train(cli: &Cli, cfg: RunConfig) -> anyhow::Result<()> {
    let root = data_root(&cfg)?.to_path_buf();
    let env_weights = std::env::var_os(EXTRACTOR_WEIGHTS_ENV).map(PathBuf::from);
    let perceptual = cfg.perceptual_setup(env_weights)?;
    let resume = match &cli.common.checkpoint {
        Some(path) => {
            let state = TrainState::load(path, &cfg.train)?;
            log::info!("resuming from {} at epoch {}", path.display(), state.epoch);
            Some(state)
        }
        None => None,
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join("run.cfg");
    std::fs::write(&cfg_path, cfg.render()).map_err(|e| Error::io(&cfg_path, e))?;

    let (outcome, log) = train(cfg.train.clone(), &root, Some(&cfg.out_dir), perceptual, resume)?;
    if let Some(last) = log.val_rows.last() {
        log::info!(
            "final validation (epoch {}): lncc {:.4} ssi {:.4} psnr {}",
            last.epoch,
            last.scores.lncc,
            last.scores.ssi,
            last.scores.psnr.map_or("inf".into(), |p| format!("{p:.3}"))
        );
    }
    match outcome.final_checkpoint {
        Some(path) => println!("{}", path.display()),
        None => log::info!("nothing left to train"),
    }
    Ok(())
}

fn png_files(dir: &Path) -> uqgan_core::Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn checkpoint_arg(cli: &Cli) -> anyhow::Result<&Path> {
    match &cli.common.checkpoint {
        Some(p) => Ok(p),
        None => Err(Error::Config("--checkpoint is required".into()).into()),
    }
}

fn cmd_enhance(cli: &Cli, cfg: RunConfig, input_dir: &Path, output_dir: &Path) -> anyhow::Result<()> {
    let g_h = load_enhancer(checkpoint_arg(cli)?)?;
    let files = png_files(input_dir)?;
    if files.is_empty() {
        log::warn!("{}: 0 images to enhance", input_dir.display());
        return Ok(());
    }
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let size = cfg.train.image_size;
    let mut failed = 0;
    for file in &files {
        let name = file.file_name().expect("listed files have names");
        let target = output_dir.join(name);
        let result = preprocess(file, size)
            .and_then(|x| g_h.enhance(&x))
            .and_then(|y| save_plane_png(y.plane(0), size, size, &target));
        if let Err(e) = result {
            log::error!("{}: {e}", file.display());
            failed += 1;
        }
    }
    log::info!("enhanced {} of {} images into {}", files.len() - failed, files.len(), output_dir.display());
    if failed > 0 {
        return Err(Error::Data(format!("{failed} of {} images could not be enhanced", files.len())).into());
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, cfg: RunConfig, report: Option<&Path>, identity: bool) -> anyhow::Result<()> {
    let root = data_root(&cfg)?;
    let enhancer: Box<dyn Enhancer> = if identity {
        Box::new(IdentityEnhancer)
    } else {
        Box::new(load_enhancer(checkpoint_arg(cli)?)?)
    };
    let pairs = load_pair_manifest(root)?.manifest;
    let result = evaluate_set(enhancer.as_ref(), &pairs, cfg.train.image_size, &cfg.train.metrics)?;
    let path = match report {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            cfg.out_dir.join("report.csv")
        }
    };
    result.save_csv(&path)?;
    print!("{}", result.table());
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_plot(cli: &Cli, log_path: &Path) -> anyhow::Result<()> {
    let csv = if log_path.is_dir() { log_path.join(VAL_LOG_FILE) } else { log_path.to_path_buf() };
    if !csv.is_file() {
        return Err(Error::Data(format!("training log {} not found", csv.display())).into());
    }
    let rows = TrainLog::read_val_csv(&csv)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no validation rows", csv.display())).into());
    }
    let out = match &cli.common.out {
        Some(dir) => dir.clone(),
        None => csv.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (stem, svg) in plot::validation_charts(&rows) {
        let path = out.join(format!("{stem}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Train => cmd_train(cli, cfg),
        Command::Enhance { input_dir, output_dir } => cmd_enhance(cli, cfg, input_dir, output_dir),
        Command::Evaluate { report, identity } => cmd_evaluate(cli, cfg, report.as_deref(), *identity),
        Command::Plot { log } => cmd_plot(cli, log),
    }
}

/// 1 = configuration, 2 = data, 3 = numeric divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Config) => 1,
        Some(ErrorClass::Numeric) => 3,
        Some(ErrorClass::Data) | None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli).context("uqgan failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
