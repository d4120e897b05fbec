//! Curriculum training: the contrastive encoder first, then the pose network
//! on windows whose length grows stage by stage.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::compute_metrics;
use crate::pose::{PlaneExtent, Trajectory};
use crate::sampling::{
    train_embedding, ContrastiveConfig, ContrastiveEncoder, EncoderReport, GroupLabel, GroupingConfig, SequenceView,
};
use crate::synth::SweepSequence;
use crate::tensor::{
    read_checkpoint, write_checkpoint, AdamW, AdamWConfig, CheckpointRecord, Graph, LrSchedule, RngKey, Tensor,
    TensorError,
};

use super::losses::{total_loss, LossValues, LossWeights};
use super::pipeline::{anchored_truth, label_frames, predict_window, prepare, reconstruct, PreparedSequence};
use super::{DropoutPass, ModelConfig, PoseModel};
use crate::mamba::derive_orderings;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}: {values:?}")]
    NonFinite { epoch: usize, values: LossValues },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    /// Replace the optimizer schedule by warm-up plus cosine decay over the run.
    pub cosine_decay: bool,
    /// Window length of each curriculum stage.
    pub stages: Vec<usize>,
    pub epochs_per_stage: usize,
    /// Windows drawn per sequence and epoch; 0 takes every window.
    pub windows_per_sequence: usize,
    pub batch_windows: usize,
    /// Probability that a window's group labels are replaced by noise labels.
    pub label_dropout: f64,
    pub uncertainty_weighting: bool,
    pub uncertainty_passes: usize,
    pub contrastive: ContrastiveConfig,
    pub grouping: GroupingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            cosine_decay: true,
            stages: vec![3, 4, 5, 6, 7],
            epochs_per_stage: 4,
            windows_per_sequence: 8,
            batch_windows: 8,
            label_dropout: 0.5,
            uncertainty_weighting: false,
            uncertainty_passes: 4,
            contrastive: ContrastiveConfig::default(),
            grouping: GroupingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.model.validate()?;
        self.weights.validate()?;
        self.optimizer.validate().map_err(|e| e.to_string())?;
        if self.stages.is_empty() || self.stages.iter().any(|&l| l < 2) {
            return Err("every curriculum stage needs a window of at least 2 frames".into());
        }
        if self.epochs_per_stage == 0 || self.batch_windows == 0 {
            return Err("epochs_per_stage and batch_windows must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err("label_dropout must lie in [0, 1]".into());
        }
        if self.uncertainty_weighting && self.uncertainty_passes < 2 {
            return Err("uncertainty weighting needs at least 2 passes".into());
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.len() * self.epochs_per_stage
    }

    /// `(stage index, window length)` of a zero-based epoch.
    pub fn stage_of(&self, epoch: usize) -> (usize, usize) {
        let s = (epoch / self.epochs_per_stage).min(self.stages.len() - 1);
        (s, self.stages[s])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub window_len: usize,
    pub loss_point: f64,
    pub loss_velocity: f64,
    pub loss_corr: f64,
    pub loss_mse: f64,
    pub loss_total: f64,
    pub val_de: Option<f64>,
}

/// A training or validation sweep with precomputed inputs.
pub struct LabelledSequence {
    pub name: String,
    pub prep: PreparedSequence,
    pub truth: Trajectory,
    pub labels: Vec<GroupLabel>,
    pub extent: PlaneExtent,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: PoseModel,
    pub encoder: ContrastiveEncoder,
    pub encoder_report: Option<EncoderReport>,
    optimizer: AdamW,
    /// Zero-based index of the next epoch to run.
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
    train: Vec<LabelledSequence>,
    val: Vec<LabelledSequence>,
}

fn labelled(
    name: String,
    seq: &SweepSequence,
    model: &PoseModel,
    encoder: &ContrastiveEncoder,
    grouping: &GroupingConfig,
) -> Result<LabelledSequence> {
    let prep = prepare(&seq.frames, model, encoder)?;
    let (_, labels) = label_frames(&prep, &seq.gt_relatives, grouping);
    Ok(LabelledSequence {
        name,
        prep,
        truth: seq.trajectory(),
        labels,
        extent: seq.extent(),
    })
}

fn steps_per_epoch(config: &TrainConfig, train: &[LabelledSequence], epoch: usize) -> usize {
    let (_, len) = config.stage_of(epoch);
    let windows: usize = train
        .iter()
        .map(|s| {
            let all = s.prep.len() + 1 - len;
            if config.windows_per_sequence == 0 {
                all
            } else {
                config.windows_per_sequence
            }
        })
        .sum();
    windows.div_ceil(config.batch_windows)
}

impl Trainer {
    /// Trains the encoder on the training sweeps and prepares both sets.
    pub fn new(config: TrainConfig, train: &[SweepSequence], val: &[SweepSequence]) -> Result<Self> {
        config.validate().map_err(TrainError::Config)?;
        if train.is_empty() {
            return Err(TrainError::Data("no training sequences".into()));
        }
        let flows: Vec<_> = train
            .iter()
            .map(|s| crate::flow::sequence_flows(&s.frames).map_err(|e| TrainError::Data(e.to_string())))
            .collect::<Result<_>>()?;
        let views: Vec<SequenceView> = train
            .iter()
            .zip(&flows)
            .map(|(s, f)| SequenceView {
                frames: &s.frames,
                flows: f,
            })
            .collect();
        let contrastive = ContrastiveConfig {
            seed: config.seed,
            ..config.contrastive.clone()
        };
        let (encoder, report) = train_embedding(&views, contrastive)?;
        log::info!(
            "contrastive encoder: loss {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss
        );
        let mut t = Self::with_encoder(config, encoder, train, val)?;
        t.encoder_report = Some(report);
        Ok(t)
    }

    pub fn with_encoder(
        config: TrainConfig,
        encoder: ContrastiveEncoder,
        train: &[SweepSequence],
        val: &[SweepSequence],
    ) -> Result<Self> {
        config.validate().map_err(TrainError::Config)?;
        let longest = *config.stages.iter().max().expect("validated");
        if let Some(short) = train.iter().find(|s| s.len() < longest) {
            return Err(TrainError::Data(format!(
                "window of {longest} frames is longer than a {}-frame training sequence",
                short.len()
            )));
        }
        let model = PoseModel::new(config.model.clone(), config.seed).map_err(TrainError::Config)?;
        let prep = |set: &[SweepSequence], tag: &str| -> Result<Vec<LabelledSequence>> {
            set.iter()
                .enumerate()
                .map(|(i, s)| labelled(format!("{tag}{i:03}"), s, &model, &encoder, &config.grouping))
                .collect()
        };
        let train = prep(train, "train")?;
        let val = prep(val, "val")?;
        let mut optimizer_cfg = config.optimizer.clone();
        if config.cosine_decay {
            let total: usize = (0..config.total_epochs()).map(|e| steps_per_epoch(&config, &train, e)).sum();
            optimizer_cfg.schedule = LrSchedule::Cosine {
                warmup_steps: (total as u64 / 20).max(1),
                total_steps: total as u64,
                min_factor: 0.05,
            };
        }
        let optimizer = AdamW::new(optimizer_cfg, &model.store)?;
        Ok(Self {
            config,
            model,
            encoder,
            encoder_report: None,
            optimizer,
            next_epoch: 0,
            history: Vec::new(),
            train,
            val,
        })
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.config.total_epochs()
    }

    pub fn validation(&self) -> &[LabelledSequence] {
        &self.val
    }

    /// Mean DE of two-pass reconstructions over the validation set.
    pub fn validation_de(&self) -> Result<Option<f64>> {
        validation_de(&self.model, &self.val, &self.config.grouping)
    }

    fn key(&self) -> RngKey {
        RngKey::new(self.config.seed).child("train", 0)
    }

    /// Window plan for an epoch: `(sequence, start, noise labels)`.
    fn plan(&self, epoch: usize, len: usize) -> Vec<(usize, usize, bool)> {
        let key = self.key().child("epoch", epoch as u64);
        let mut rng = key.rng();
        let mut plan = Vec::new();
        for (i, s) in self.train.iter().enumerate() {
            let last = s.prep.len() - len;
            if self.config.windows_per_sequence == 0 {
                plan.extend((0..=last).map(|st| (i, st, false)));
            } else {
                plan.extend((0..self.config.windows_per_sequence).map(|_| (i, rng.random_range(0..=last), false)));
            }
        }
        plan.shuffle(&mut rng);
        for p in &mut plan {
            p.2 = rng.random::<f64>() < self.config.label_dropout;
        }
        plan
    }

    fn window_weight(&self, seq: &LabelledSequence, start: usize, len: usize, labels: &[GroupLabel], key: RngKey) -> Result<f64> {
        if !self.config.uncertainty_weighting {
            return Ok(1.0);
        }
        let rate = self.config.model.dropout.max(0.05);
        let samples: Vec<[f64; 6]> = (0..self.config.uncertainty_passes)
            .map(|k| {
                let p = predict_window(
                    &self.model,
                    &seq.prep,
                    start,
                    len,
                    labels,
                    Some(DropoutPass {
                        rate,
                        key: key.child("weight", k as u64),
                    }),
                )?;
                Ok(p[len - 2].inverse().compose(&p[len - 1]).to_array())
            })
            .collect::<Result<_>>()?;
        Ok(1.0 / (1.0 + crate::hitl::pose_variance(&samples)))
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        let (stage, len) = self.config.stage_of(epoch);
        let plan = self.plan(epoch, len);
        let ekey = self.key().child("epoch", epoch as u64);
        let noise = vec![GroupLabel::Noise; len];
        let mut sums = LossValues::default();
        for (b, batch) in plan.chunks(self.config.batch_windows).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for (w, &(si, start, drop_labels)) in batch.iter().enumerate() {
                let seq = &self.train[si];
                let labels: Vec<GroupLabel> = if drop_labels {
                    noise.clone()
                } else {
                    seq.labels[start..start + len].to_vec()
                };
                let wkey = ekey.child("window", (b * self.config.batch_windows + w) as u64);
                let full = pad_labels(&labels, start, seq.prep.len());
                let weight = self.window_weight(seq, start, len, &full, wkey)?;
                let win = seq.prep.window(start, len, &full);
                let (fo, no) = derive_orderings(&seq.prep.embeddings()[start..start + len]);
                let mut g = Graph::new();
                let dropout = (self.config.model.dropout > 0.0).then_some(DropoutPass {
                    rate: self.config.model.dropout,
                    key: wkey,
                });
                let out = self.model.forward(&mut g, &self.model.store, &win, (&fo, &no), dropout)?;
                let gt = anchored_truth(&seq.truth, start, len);
                let terms = total_loss(
                    &mut g,
                    out.poses,
                    &gt,
                    (out.fps_stream, out.nps_stream),
                    &self.config.weights,
                    seq.extent,
                )?;
                let values = terms.values(&g);
                if ![values.point, values.velocity, values.corr, values.mse, values.total]
                    .iter()
                    .all(|v| v.is_finite())
                {
                    return Err(TrainError::NonFinite { epoch, values });
                }
                sums.point += values.point;
                sums.velocity += values.velocity;
                sums.corr += values.corr;
                sums.mse += values.mse;
                sums.total += values.total;
                let root = g.scale(terms.total, weight / batch.len() as f64)?;
                let grads = g.backward(root)?;
                let pg = g.param_grads(&grads, &self.model.store);
                acc = Some(match acc {
                    None => pg,
                    Some(mut a) => {
                        for (x, y) in a.iter_mut().zip(&pg) {
                            x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                        }
                        a
                    }
                });
            }
            if let Some(grads) = acc {
                self.optimizer.step(&mut self.model.store, &grads)?;
                self.model.project();
            }
        }
        let n = plan.len().max(1) as f64;
        let val_de = self.validation_de()?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            stage: stage + 1,
            window_len: len,
            loss_point: sums.point / n,
            loss_velocity: sums.velocity / n,
            loss_corr: sums.corr / n,
            loss_mse: sums.mse / n,
            loss_total: sums.total / n,
            val_de,
        };
        log::info!(
            "epoch {} stage {} L={} loss {:.5} val DE {}",
            rec.epoch,
            rec.stage,
            len,
            rec.loss_total,
            val_de.map_or("-".into(), |v| format!("{v:.4}"))
        );
        self.history.push(rec.clone());
        self.next_epoch += 1;
        Ok(rec)
    }

    pub fn run(&mut self) -> Result<&[EpochRecord]> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }

    pub fn checkpoint_records(&self) -> Vec<CheckpointRecord> {
        let mut recs = self.model.store.to_records();
        recs.extend(self.encoder.store.to_records());
        recs.extend(self.optimizer.to_records(&self.model.store, "adam/"));
        recs.push(CheckpointRecord {
            name: "meta/epoch".into(),
            tensor: Tensor::scalar(self.next_epoch as f64),
        });
        recs
    }

    /// Restores parameters, optimizer moments and the epoch counter.
    pub fn load_records(&mut self, recs: &[CheckpointRecord]) -> Result<()> {
        self.model.store.load_records(recs, "")?;
        self.optimizer.load_records(&self.model.store, recs, "adam/")?;
        let epoch = recs
            .iter()
            .find(|r| r.name == "meta/epoch")
            .ok_or_else(|| TrainError::Data("checkpoint lacks meta/epoch".into()))?;
        self.next_epoch = epoch.tensor.item() as usize;
        Ok(())
    }
}

/// Labels for the whole sequence with `window` written at `start`, so that
/// [`PreparedSequence::window`] can slice them back out.
fn pad_labels(window: &[GroupLabel], start: usize, frames: usize) -> Vec<GroupLabel> {
    let mut out = vec![GroupLabel::Noise; frames];
    out[start..start + window.len()].copy_from_slice(window);
    out
}

pub fn validation_de(model: &PoseModel, val: &[LabelledSequence], grouping: &GroupingConfig) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in val {
        let rec = reconstruct(model, &s.prep, grouping)?;
        let m = compute_metrics(&rec.trajectory, &s.truth, s.extent, &s.name)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        total += m.de;
    }
    Ok(Some(total / val.len() as f64))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const LOCK_FILE: &str = "train.lock";

/// Exclusive claim on a training output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(TrainError::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Data(e.to_string()))?;
    w.write_record([
        "epoch",
        "stage",
        "window_len",
        "loss_point",
        "loss_velocity",
        "loss_corr",
        "loss_mse",
        "loss_total",
        "val_de",
    ])
    .map_err(|e| TrainError::Data(e.to_string()))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.stage.to_string(),
            r.window_len.to_string(),
            format!("{:.9}", r.loss_point),
            format!("{:.9}", r.loss_velocity),
            format!("{:.9}", r.loss_corr),
            format!("{:.9}", r.loss_mse),
            format!("{:.9}", r.loss_total),
            r.val_de.map_or(String::new(), |v| format!("{v:.9}")),
        ])
        .map_err(|e| TrainError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Data(e.to_string()))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| TrainError::Data(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TrainError::Data(format!("bad history field {i}")))
        };
        out.push(EpochRecord {
            epoch: f(0)? as usize,
            stage: f(1)? as usize,
            window_len: f(2)? as usize,
            loss_point: f(3)?,
            loss_velocity: f(4)?,
            loss_corr: f(5)?,
            loss_mse: f(6)?,
            loss_total: f(7)?,
            val_de: row.get(8).and_then(|s| s.parse().ok()),
        });
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, trainer: &Trainer) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_checkpoint(BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?), &trainer.checkpoint_records())?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&trainer.config).expect("config serialises"),
    )?;
    write_history(&dir.join(HISTORY_FILE), &trainer.history)
}

pub fn load_checkpoint_file(path: &Path) -> Result<Vec<CheckpointRecord>> {
    Ok(read_checkpoint(BufReader::new(File::open(path)?))?)
}

/// Rebuilds a trainer from a saved run directory without retraining the encoder.
pub fn resume(dir: &Path, train: &[SweepSequence], val: &[SweepSequence]) -> Result<Trainer> {
    let config: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let recs = load_checkpoint_file(&dir.join(CHECKPOINT_FILE))?;
    let mut encoder = ContrastiveEncoder::new(ContrastiveConfig {
        seed: config.seed,
        ..config.contrastive.clone()
    });
    encoder.store.load_records(&recs, "")?;
    let mut t = Trainer::with_encoder(config, encoder, train, val)?;
    t.load_records(&recs)?;
    t.history = read_history(&dir.join(HISTORY_FILE))?;
    Ok(t)
}

/// Model and encoder of a finished run, for inference.
pub fn load_inference(dir: &Path) -> Result<(TrainConfig, PoseModel, ContrastiveEncoder)> {
    let config: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let recs = load_checkpoint_file(&dir.join(CHECKPOINT_FILE))?;
    let mut model = PoseModel::new(config.model.clone(), config.seed).map_err(TrainError::Config)?;
    model.store.load_records(&recs, "")?;
    let mut encoder = ContrastiveEncoder::new(ContrastiveConfig {
        seed: config.seed,
        ..config.contrastive.clone()
    });
    encoder.store.load_records(&recs, "")?;
    Ok((config, model, encoder))
}
