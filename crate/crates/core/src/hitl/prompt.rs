//! Operator prompts for frames that fail the safety gate.

use serde::{Deserialize, Serialize};

use super::gate::GateLevel;
use super::HitlError;

pub const REACQUIRE: &str = "Reacquire at same location";
pub const INCREASE_PRESSURE: &str = "Increase contact pressure";
pub const SLOW_DOWN: &str = "Slow down probe";
pub const RESCAN_LEFT: &str = "Rescan left boundary";
pub const RESCAN_RIGHT: &str = "Rescan right boundary";

pub const PROMPT_CATALOG: [&str; 5] = [REACQUIRE, INCREASE_PRESSURE, SLOW_DOWN, RESCAN_LEFT, RESCAN_RIGHT];

/// Mean intensity below this share of the running mean suggests lost contact.
pub const COUPLING_RATIO: f64 = 0.5;
/// Flow speed above this multiple of the running median suggests rushing.
pub const VELOCITY_RATIO: f64 = 2.0;
/// Saliency share of one half above which a boundary rescan is requested.
pub const LATERAL_SHARE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptCause {
    Misalignment,
    PoorCoupling,
    TemporalInstability,
    CriticalUncertainty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorPrompt {
    pub cause: PromptCause,
    pub message: String,
    pub frame: usize,
}

/// Frame statistics the prompt rules look at. Running references are absent
/// until some frames have been accepted.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Diagnostics {
    pub mean_intensity: f64,
    pub running_mean_intensity: Option<f64>,
    pub velocity: f64,
    pub running_median_velocity: Option<f64>,
    /// Share of saliency mass in the left half of the frame.
    pub saliency_left_share: f64,
}

pub fn generate_prompt(level: GateLevel, frame: usize, diag: &Diagnostics) -> Result<OperatorPrompt, HitlError> {
    let make = |cause, message: &str| OperatorPrompt {
        cause,
        message: message.to_string(),
        frame,
    };
    match level {
        GateLevel::Safe => Err(HitlError::SafeGate),
        GateLevel::Critical => Ok(make(PromptCause::CriticalUncertainty, REACQUIRE)),
        GateLevel::Caution => {
            if diag
                .running_mean_intensity
                .is_some_and(|m| diag.mean_intensity < COUPLING_RATIO * m)
            {
                return Ok(make(PromptCause::PoorCoupling, INCREASE_PRESSURE));
            }
            if diag
                .running_median_velocity
                .is_some_and(|m| diag.velocity > VELOCITY_RATIO * m)
            {
                return Ok(make(PromptCause::TemporalInstability, SLOW_DOWN));
            }
            let left = diag.saliency_left_share;
            if left > LATERAL_SHARE {
                return Ok(make(PromptCause::Misalignment, RESCAN_LEFT));
            }
            if 1.0 - left > LATERAL_SHARE {
                return Ok(make(PromptCause::Misalignment, RESCAN_RIGHT));
            }
            Ok(make(
                PromptCause::Misalignment,
                if left >= 0.5 { RESCAN_LEFT } else { RESCAN_RIGHT },
            ))
        }
    }
}
