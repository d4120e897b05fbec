//! Uncertainty gating, attribution maps, operator prompts and the
//! closed-loop acquisition session.

pub mod gate;
pub mod prompt;
pub mod protocol;
pub mod saliency;
pub mod session;
pub mod uncertainty;

pub use gate::{calibrate_thresholds, gate, GateLevel, Thresholds};
pub use prompt::{generate_prompt, Diagnostics, OperatorPrompt, PromptCause};
pub use saliency::PixelMap;
pub use session::{sweep_variances, Mode, Session, SessionConfig, StepOutput};
pub use uncertainty::{mc_window, mean_pose, pose_variance, McConfig, UncertaintyReport};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HitlError {
    #[error("thresholds must satisfy 0 < tau1 < tau2, got {tau1}, {tau2}")]
    InvalidThresholds { tau1: f64, tau2: f64 },
    #[error("quantiles must satisfy 0 < safe < critical < 1, got {0}, {1}")]
    InvalidQuantiles(f64, f64),
    #[error("no variances to calibrate on")]
    Empty,
    #[error("at least 2 stochastic passes are needed, got {0}")]
    TooFewPasses(usize),
    #[error("prompts are only issued for caution or critical frames")]
    SafeGate,
    #[error("frame is {width}x{height}, session expects {expected}x{expected}")]
    FrameDims { expected: usize, width: usize, height: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] TensorError),
}
