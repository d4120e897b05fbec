//! Run configuration, command implementations and the session server.

pub mod commands;
pub mod live;
pub mod server;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hitl::{gate::DEFAULT_QUANTILES, HitlError, McConfig, SessionConfig};
use crate::metrics::MetricsError;
use crate::model::train::{TrainConfig, TrainError};
use crate::pose::PoseError;
use crate::synth::{SweepSpec, SynthError};
use crate::tensor::TensorError;

pub use commands::{
    cmd_calibrate, cmd_eval, cmd_generate, cmd_metrics, cmd_train, load_dataset, Calibration, EvalOutput,
};
pub use live::LiveSweep;
pub use server::{Server, ServerHandle};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset {0}: {1}")]
    Dataset(PathBuf, String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hitl(#[from] HitlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// Sweeps to synthesise: the listed specs, or a generated family when none are listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub sweeps: Vec<SweepSpec>,
    pub count: usize,
    pub frames: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            sweeps: Vec::new(),
            count: 8,
            frames: 40,
        }
    }
}

/// Dataset directories, each holding one sequence or one sequence per subdirectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub safe_quantile: f64,
    pub critical_quantile: f64,
    pub mc: McConfig,
    pub window: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            safe_quantile: DEFAULT_QUANTILES.0,
            critical_quantile: DEFAULT_QUANTILES.1,
            mc: McConfig::default(),
            window: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    pub session: SessionConfig,
    /// The simulated live sweep; its `frames` only bounds speed bursts and perturbations.
    pub sweep: SweepSpec,
    /// Largest `count` accepted in one advance request.
    pub max_advance: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let mut sweep = SweepSpec::linear(400, 0.5, 1);
        sweep.noise_std = 0.02;
        Self {
            bind: "127.0.0.1:7878".into(),
            session: SessionConfig::default(),
            sweep,
            max_advance: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub calibrate: CalibrateConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataPaths::default(),
            generate: GenerateConfig::default(),
            train: TrainConfig::default(),
            calibrate: CalibrateConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Replaces the run seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.calibrate.mc.seed = seed;
        self.serve.session.mc.seed = seed;
        self.serve.sweep.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if let Err(e) = self.train.validate() {
            return bad(e);
        }
        for s in &self.generate.sweeps {
            s.validate()?;
        }
        if self.generate.sweeps.is_empty() && (self.generate.count == 0 || self.generate.frames < 2) {
            return bad("generate needs count >= 1 and frames >= 2".into());
        }
        let c = &self.calibrate;
        if !(0.0 < c.safe_quantile && c.safe_quantile < c.critical_quantile && c.critical_quantile < 1.0) {
            return bad(format!(
                "calibration quantiles must satisfy 0 < {} < {} < 1",
                c.safe_quantile, c.critical_quantile
            ));
        }
        c.mc.validate()?;
        if c.window < 2 {
            return bad("calibration window must be at least 2".into());
        }
        self.serve.session.validate()?;
        self.serve.sweep.validate()?;
        if self.serve.sweep.width != self.train.model.frame_size || self.serve.sweep.height != self.train.model.frame_size
        {
            return bad("served sweep frames must match the model frame size".into());
        }
        if self.serve.max_advance == 0 {
            return bad("max_advance must be positive".into());
        }
        Ok(())
    }
}
