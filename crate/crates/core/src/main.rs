use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use freehand::metrics::{format_table, to_csv};
use freehand::pose::PlaneExtent;
use freehand::service::commands::{load_estimator, Calibration, THRESHOLDS_FILE};
use freehand::service::{cmd_calibrate, cmd_eval, cmd_generate, cmd_metrics, cmd_train, RunConfig, Server, ServiceError};
use freehand::synth::PIXEL_SPACING_MM;

/// Log level filter, e.g. `FREEHAND_LOG=debug`.
const LOG_ENV: &str = "FREEHAND_LOG";

#[derive(Parser)]
#[command(name = "freehand", version, about = "Trackerless freehand ultrasound reconstruction")]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `metrics`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise sweeps into `--out`.
    Generate,
    /// Train into `--out`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct and score a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score one trajectory file against another.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Frame width and height in pixels.
        #[arg(long, default_value_t = 64)]
        pixels: usize,
    },
    /// Derive gate thresholds from clean sweeps.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the session server.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bind: Option<String>,
        /// Calibration file; defaults to the checkpoint's when present.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
}

fn out_dir(cli: &Cli) -> Result<&Path, ServiceError> {
    cli.out
        .as_deref()
        .ok_or_else(|| ServiceError::Config("--out is required".into()))
}

fn run(cli: Cli) -> Result<(), ServiceError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match &cli.command {
        Command::Generate => {
            for d in cmd_generate(&cfg, out_dir(&cli)?)? {
                println!("{}", d.display());
            }
        }
        Command::Train { data, val, resume } => {
            if data.is_some() {
                cfg.data.train = data.clone();
            }
            if val.is_some() {
                cfg.data.val = val.clone();
            }
            let history = cmd_train(&cfg, out_dir(&cli)?, *resume)?;
            if let Some(last) = history.last() {
                println!("epochs {} final loss {:.5}", last.epoch, last.loss_total);
            }
        }
        Command::Eval { checkpoint, data } => {
            let data = data
                .clone()
                .or(cfg.data.eval.clone())
                .ok_or_else(|| ServiceError::Config("--data or data.eval is required".into()))?;
            let report = cmd_eval(checkpoint, &data, cli.out.as_deref())?;
            print!("{}", report.table());
        }
        Command::Metrics { pred, gt, pixels } => {
            let side = *pixels as f64 * PIXEL_SPACING_MM;
            let r = cmd_metrics(pred, gt, PlaneExtent::new(side, side))?;
            match &cli.out {
                Some(path) => std::fs::write(path, to_csv(std::slice::from_ref(&r)))?,
                None => print!("{}", format_table(std::slice::from_ref(&r), None)),
            }
        }
        Command::Calibrate { checkpoint, data } => {
            let data = data
                .clone()
                .or(cfg.data.calibration.clone())
                .ok_or_else(|| ServiceError::Config("--data or data.calibration is required".into()))?;
            let cal = cmd_calibrate(checkpoint, &data, &cfg.calibrate, cli.out.as_deref())?;
            println!(
                "tau1 {:.6} tau2 {:.6} from {} frames",
                cal.thresholds.tau1, cal.thresholds.tau2, cal.samples
            );
        }
        Command::Serve {
            checkpoint,
            bind,
            thresholds,
        } => {
            let path = thresholds.clone().unwrap_or_else(|| checkpoint.join(THRESHOLDS_FILE));
            if path.is_file() {
                cfg.serve.session.thresholds = Calibration::load(&path)?.thresholds;
                log::info!("thresholds from {}", path.display());
            } else if thresholds.is_some() {
                return Err(ServiceError::Config(format!("{} not found", path.display())));
            }
            let bind = bind.clone().unwrap_or(cfg.serve.bind.clone());
            let est = Arc::new(load_estimator(checkpoint)?);
            Server::bind(&bind, est, cfg.serve.clone())?.run()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
