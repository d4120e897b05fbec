//! Closed-loop acquisition: every incoming frame is scored, gated and either
//! appended to the trajectory or answered with an operator prompt.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::flow::median;
use crate::mamba::derive_orderings;
use crate::model::pipeline::{predict_window_input, prepare_frame, Estimator};
use crate::model::{FrameAux, WindowInput};
use crate::pose::{Pose6DoF, Trajectory};
use crate::sampling::GroupLabel;
use crate::synth::Frame;
use crate::tensor::RngKey;

use super::gate::{gate, GateLevel, Thresholds};
use super::prompt::{generate_prompt, Diagnostics, OperatorPrompt};
use super::saliency::{saliency, uncertainty_heatmap, PixelMap};
use super::uncertainty::{mc_window, McConfig, UncertaintyReport};
use super::HitlError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Live,
    AwaitingCorrection,
}

/// Mode after a scored frame: safe frames return to live, anything else waits
/// for a correction.
pub fn transition(_mode: Mode, level: GateLevel) -> Mode {
    match level {
        GateLevel::Safe => Mode::Live,
        GateLevel::Caution | GateLevel::Critical => Mode::AwaitingCorrection,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub thresholds: Thresholds,
    pub mc: McConfig,
    /// Frames per scored window, the new frame included.
    pub window: usize,
    /// Accepted frames kept for running statistics.
    pub history: usize,
    /// Produce saliency and uncertainty maps for every frame, not only rejected ones.
    pub always_maps: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds { tau1: 1.0, tau2: 4.0 },
            mc: McConfig::default(),
            window: 7,
            history: 32,
            always_maps: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), HitlError> {
        Thresholds::new(self.thresholds.tau1, self.thresholds.tau2)?;
        self.mc.validate()?;
        if self.window < 2 || self.history == 0 {
            return Err(HitlError::Invalid("window must be >= 2 and history > 0".into()));
        }
        Ok(())
    }
}

struct Accepted {
    frame: Frame,
    pixels: Vec<f64>,
    aux: FrameAux,
    velocity: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: UncertaintyReport,
    /// Absolute pose of the frame when it was accepted.
    pub pose: Option<Pose6DoF>,
    pub prompt: Option<OperatorPrompt>,
    pub saliency: Option<PixelMap>,
    pub heatmap: Option<PixelMap>,
    pub mode: Mode,
}

impl StepOutput {
    pub fn accepted(&self) -> bool {
        self.pose.is_some()
    }
}

pub struct Session {
    estimator: Arc<Estimator>,
    config: SessionConfig,
    mode: Mode,
    recent: VecDeque<Accepted>,
    trajectory: Vec<Pose6DoF>,
    pending: Option<OperatorPrompt>,
    transitions: Vec<(Mode, GateLevel, Mode)>,
    prompts: usize,
    scored: usize,
}

impl Session {
    pub fn new(estimator: Arc<Estimator>, config: SessionConfig) -> Result<Self, HitlError> {
        config.validate()?;
        Ok(Self {
            estimator,
            config,
            mode: Mode::Live,
            recent: VecDeque::new(),
            trajectory: Vec::new(),
            pending: None,
            transitions: Vec::new(),
            prompts: 0,
            scored: 0,
        })
    }

    /// A session whose gate never fires, for collecting raw variances.
    pub fn observer(estimator: Arc<Estimator>, mc: McConfig, window: usize) -> Result<Self, HitlError> {
        let mut s = Self::new(
            estimator,
            SessionConfig {
                mc,
                window,
                ..SessionConfig::default()
            },
        )?;
        s.config.thresholds = Thresholds::permissive();
        Ok(s)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn set_thresholds(&mut self, t: Thresholds) {
        self.config.thresholds = t;
    }

    pub fn pending_prompt(&self) -> Option<&OperatorPrompt> {
        self.pending.as_ref()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.trajectory.clone()).unwrap_or_else(|_| Trajectory::identity(0))
    }

    pub fn accepted_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn prompts_issued(&self) -> usize {
        self.prompts
    }

    pub fn frames_scored(&self) -> usize {
        self.scored
    }

    /// Every `(mode before, gate, mode after)` seen so far.
    pub fn transitions(&self) -> &[(Mode, GateLevel, Mode)] {
        &self.transitions
    }

    pub fn last_accepted(&self) -> Option<&Frame> {
        self.recent.back().map(|a| &a.frame)
    }

    fn diagnostics(&self, frame: &Frame, velocity: f64, saliency_left: f64) -> Diagnostics {
        let n = self.recent.len();
        let running_mean_intensity = (n > 0).then(|| self.recent.iter().map(|a| a.frame.mean()).sum::<f64>() / n as f64);
        let mut v: Vec<f64> = self.recent.iter().skip(1).map(|a| a.velocity).collect();
        Diagnostics {
            mean_intensity: frame.mean(),
            running_mean_intensity,
            velocity,
            running_median_velocity: median(&mut v),
            saliency_left_share: saliency_left,
        }
    }

    fn accept(&mut self, frame: Frame, pixels: Vec<f64>, aux: FrameAux, velocity: f64, pose: Pose6DoF) {
        self.trajectory.push(pose);
        self.recent.push_back(Accepted {
            frame,
            pixels,
            aux,
            velocity,
        });
        let keep = self.config.history.max(self.config.window);
        while self.recent.len() > keep {
            self.recent.pop_front();
        }
    }

    /// Scores one frame and advances the state machine.
    pub fn step(&mut self, frame: Frame) -> Result<StepOutput, HitlError> {
        let est = Arc::clone(&self.estimator);
        let size = est.model.config.frame_size;
        if frame.width != size || frame.height != size {
            return Err(HitlError::FrameDims {
                expected: size,
                width: frame.width,
                height: frame.height,
            });
        }
        let index = self.trajectory.len();
        self.scored += 1;
        let prev = self.recent.back().map(|a| &a.frame);
        let (pixels, aux, field) = prepare_frame(&est.model, &est.encoder, prev, &frame)?;
        let Some(_) = prev else {
            // The first frame defines the reference plane.
            let report = UncertaintyReport {
                frame: 0,
                mean: Pose6DoF::IDENTITY,
                sigma2: 0.0,
                passes: 0,
                gate: GateLevel::Safe,
            };
            self.accept(frame, pixels, aux, 0.0, Pose6DoF::IDENTITY);
            self.transitions.push((self.mode, GateLevel::Safe, Mode::Live));
            self.mode = Mode::Live;
            return Ok(StepOutput {
                report,
                pose: Some(Pose6DoF::IDENTITY),
                prompt: None,
                saliency: None,
                heatmap: None,
                mode: self.mode,
            });
        };
        let velocity = field.as_ref().map_or(0.0, |f| f.mean_magnitude());
        let take = (self.config.window - 1).min(self.recent.len());
        let context: Vec<&Accepted> = self.recent.iter().skip(self.recent.len() - take).collect();
        let mut win_pixels: Vec<&[f64]> = context.iter().map(|a| a.pixels.as_slice()).collect();
        win_pixels.push(&pixels);
        let mut win_aux: Vec<&FrameAux> = context.iter().map(|a| &a.aux).collect();
        win_aux.push(&aux);
        let len = win_pixels.len();
        let win = WindowInput {
            pixels: win_pixels,
            aux: win_aux,
            labels: vec![GroupLabel::Noise; len],
        };
        let emb: Vec<Vec<f64>> = win.aux.iter().map(|a| a.embedding.clone()).collect();
        let (fo, no) = derive_orderings(&emb);
        let key = RngKey::new(self.config.mc.seed).child("mc", index as u64);
        let mc = mc_window(&est.model, &win, (&fo, &no), &self.config.mc, key)?;
        let level = gate(mc.sigma2, &self.config.thresholds);
        let report = UncertaintyReport {
            frame: index,
            mean: Pose6DoF::from_array(mc.mean),
            sigma2: mc.sigma2,
            passes: self.config.mc.passes,
            gate: level,
        };
        let want_maps = self.config.always_maps || level != GateLevel::Safe;
        let (sal, heat) = if want_maps {
            let grid = est.model.config.grid();
            (
                Some(saliency(&est.model, &win, (&fo, &no))?),
                Some(uncertainty_heatmap(&mc.cell_variance, grid, size, size)),
            )
        } else {
            (None, None)
        };
        let before = self.mode;
        let after = transition(before, level);
        self.transitions.push((before, level, after));
        self.mode = after;
        if level == GateLevel::Safe {
            let anchored = predict_window_input(&est.model, &win, (&fo, &no))?;
            let rel = anchored[len - 2].inverse().compose(&anchored[len - 1]);
            let pose = self.trajectory.last().expect("reference accepted").compose(&rel);
            self.pending = None;
            self.accept(frame, pixels, aux, velocity, pose);
            return Ok(StepOutput {
                report,
                pose: Some(pose),
                prompt: None,
                saliency: sal,
                heatmap: heat,
                mode: self.mode,
            });
        }
        let left = sal.as_ref().map_or(0.5, PixelMap::left_share);
        let diag = self.diagnostics(&frame, velocity, left);
        let prompt = generate_prompt(level, index, &diag)?;
        self.pending = Some(prompt.clone());
        self.prompts += 1;
        Ok(StepOutput {
            report,
            pose: None,
            prompt: Some(prompt),
            saliency: sal,
            heatmap: heat,
            mode: self.mode,
        })
    }
}

/// Variances of every frame after the first, scored as a live session with a
/// gate that never fires.
pub fn sweep_variances(
    estimator: Arc<Estimator>,
    frames: &[Frame],
    mc: &McConfig,
    window: usize,
) -> Result<Vec<f64>, HitlError> {
    let mut s = Session::observer(estimator, mc.clone(), window)?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let step = s.step(f.clone())?;
        if i > 0 {
            out.push(step.report.sigma2);
        }
    }
    Ok(out)
}
