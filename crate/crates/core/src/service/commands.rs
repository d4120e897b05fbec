//! The work behind each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::hitl::{calibrate_thresholds, sweep_variances, Thresholds};
use crate::metrics::{aggregate, compute_metrics, format_table, to_csv, to_json, AggregateReport, MetricsReport};
use crate::model::pipeline::Estimator;
use crate::model::train::{
    load_inference, resume, save_checkpoint, DirLock, EpochRecord, Trainer, CHECKPOINT_FILE,
};
use crate::pose::{read_trajectory, write_trajectory, PlaneExtent};
use crate::synth::{generate, load_sequence, save_sequence, sweep_family, SweepSequence};

use super::{CalibrateConfig, Result, RunConfig, ServiceError};

pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

fn is_sequence(dir: &Path) -> bool {
    dir.join("frames.bin").is_file()
}

/// A sequence directory, or a directory of sequence directories in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, SweepSequence)>> {
    let name_of = |p: &Path| p.file_name().map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
    if is_sequence(dir) {
        return Ok(vec![(name_of(dir), load_sequence(dir)?)]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ServiceError::Dataset(dir.to_path_buf(), e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_sequence(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ServiceError::Dataset(dir.to_path_buf(), "no sequences found".into()));
    }
    dirs.iter().map(|d| Ok((name_of(d), load_sequence(d)?))).collect()
}

fn sequences(dir: &Path) -> Result<Vec<SweepSequence>> {
    Ok(load_dataset(dir)?.into_iter().map(|(_, s)| s).collect())
}

/// Writes one sequence into `out`, or several into `out/seq_NNN`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let specs = if cfg.generate.sweeps.is_empty() {
        sweep_family(cfg.generate.count, cfg.generate.frames, cfg.seed)
    } else {
        cfg.generate.sweeps.clone()
    };
    let mut dirs = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let dir = if specs.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seq_{i:03}"))
        };
        save_sequence(&generate(spec)?, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| ServiceError::Config(format!("data.{what} is required")))
}

/// Trains into `out`, saving a checkpoint after every epoch. With `resume`
/// an existing checkpoint in `out` is continued.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume_run: bool) -> Result<Vec<EpochRecord>> {
    let _lock = DirLock::acquire(out)?;
    let train = sequences(required(&cfg.data.train, "train")?)?;
    let val = match &cfg.data.val {
        Some(p) => sequences(p)?,
        None => Vec::new(),
    };
    let mut trainer = if resume_run && out.join(CHECKPOINT_FILE).is_file() {
        log::info!("resuming from {}", out.display());
        resume(out, &train, &val)?
    } else {
        Trainer::new(cfg.train.clone(), &train, &val)?
    };
    while !trainer.is_done() {
        trainer.run_epoch()?;
        save_checkpoint(out, &trainer)?;
    }
    Ok(trainer.history.clone())
}

pub fn load_estimator(checkpoint: &Path) -> Result<Estimator> {
    let (cfg, model, encoder) = load_inference(checkpoint)?;
    Ok(Estimator {
        model,
        encoder,
        grouping: cfg.grouping,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub reports: Vec<MetricsReport>,
    pub summary: AggregateReport,
}

impl EvalOutput {
    pub fn table(&self) -> String {
        format_table(&self.reports, Some(&self.summary))
    }
}

/// Reconstructs every sequence and scores it against its ground truth.
pub fn evaluate(est: &Estimator, data: &[(String, SweepSequence)], out: Option<&Path>) -> Result<EvalOutput> {
    let mut reports = Vec::with_capacity(data.len());
    for (name, seq) in data {
        let rec = est.reconstruct(&seq.frames)?;
        if let Some(dir) = out {
            let pred = dir.join("pred");
            fs::create_dir_all(&pred)?;
            write_trajectory(&pred.join(format!("{name}.txt")), &rec.trajectory, Some("tx ty tz rx ry rz"))?;
        }
        reports.push(compute_metrics(&rec.trajectory, &seq.trajectory(), seq.extent(), name)?);
    }
    let summary = aggregate(&reports)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_CSV), to_csv(&reports))?;
        fs::write(dir.join(METRICS_JSON), to_json(&reports, Some(&summary)))?;
    }
    Ok(EvalOutput { reports, summary })
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<EvalOutput> {
    let est = load_estimator(checkpoint)?;
    evaluate(&est, &load_dataset(dataset)?, out)
}

/// Scores a predicted trajectory file against a ground-truth file.
pub fn cmd_metrics(pred: &Path, gt: &Path, extent: PlaneExtent) -> Result<MetricsReport> {
    let name = pred.file_stem().map_or("prediction".into(), |s| s.to_string_lossy().into_owned());
    Ok(compute_metrics(&read_trajectory(pred)?, &read_trajectory(gt)?, extent, &name)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub thresholds: Thresholds,
    pub safe_quantile: f64,
    pub critical_quantile: f64,
    pub passes: usize,
    /// Number of scored frames the quantiles were taken over.
    pub samples: usize,
}

impl Calibration {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| ServiceError::Config(e.to_string()))
    }
}

/// Variance quantiles over clean sweeps, scored as a live session would score them.
pub fn calibrate(est: Arc<Estimator>, data: &[SweepSequence], cfg: &CalibrateConfig) -> Result<Calibration> {
    let mut all = Vec::new();
    for seq in data {
        all.extend(sweep_variances(Arc::clone(&est), &seq.frames, &cfg.mc, cfg.window)?);
    }
    let thresholds = calibrate_thresholds(&all, cfg.safe_quantile, cfg.critical_quantile)?;
    Ok(Calibration {
        thresholds,
        safe_quantile: cfg.safe_quantile,
        critical_quantile: cfg.critical_quantile,
        passes: cfg.mc.passes,
        samples: all.len(),
    })
}

pub fn cmd_calibrate(checkpoint: &Path, dataset: &Path, cfg: &CalibrateConfig, out: Option<&Path>) -> Result<Calibration> {
    let est = Arc::new(load_estimator(checkpoint)?);
    let cal = calibrate(est, &sequences(dataset)?, cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(THRESHOLDS_FILE),
            serde_json::to_string_pretty(&cal).expect("calibration serialises"),
        )?;
    }
    Ok(cal)
}
