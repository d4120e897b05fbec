//! A simulated probe that acquires frames on demand and responds to operator actions.

use crate::hitl::protocol::{OperatorAction, Side};
use crate::pose::Pose6DoF;
use crate::synth::{render_frame, Frame, IntensityPerturbation, SweepSpec};

/// Lateral offset applied when rescanning towards one side, in millimetres.
pub const RESCAN_OFFSET_MM: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ActionError {
    #[error("slow-down factor must lie in (0, 1], got {0}")]
    Factor(f64),
    #[error("press gain must lie in (0, 4], got {0}")]
    Gain(f64),
    #[error("cannot step back {wanted} frames with {accepted} accepted")]
    Rescan { wanted: usize, accepted: usize },
    #[error("nothing accepted yet")]
    NothingAccepted,
}

/// Walks the probe along a sweep spec. Bursts and intensity perturbations are
/// indexed by the motion step, so they stay in place when the operator slows
/// down or steps back.
#[derive(Clone, Debug)]
pub struct LiveSweep {
    spec: SweepSpec,
    step: usize,
    acquired: usize,
    pose: Pose6DoF,
    speed: f64,
    gain: f64,
    contact_restored: bool,
    accepted: Vec<Pose6DoF>,
    last: Option<Pose6DoF>,
}

impl LiveSweep {
    pub fn new(spec: SweepSpec) -> Self {
        Self {
            spec,
            step: 0,
            acquired: 0,
            pose: Pose6DoF::IDENTITY,
            speed: 1.0,
            gain: 1.0,
            contact_restored: false,
            accepted: Vec::new(),
            last: None,
        }
    }

    pub fn speed_factor(&self) -> f64 {
        self.speed
    }

    pub fn pose(&self) -> Pose6DoF {
        self.pose
    }

    pub fn acquired(&self) -> usize {
        self.acquired
    }

    fn intensity_factor(&self) -> f64 {
        let mut f = self.gain;
        for p in &self.spec.perturbations {
            match *p {
                IntensityPerturbation::Brightness { start, end, gain } if (start..end).contains(&self.step) => f *= gain,
                IntensityPerturbation::Contact { start, end, factor }
                    if !self.contact_restored && (start..end).contains(&self.step) =>
                {
                    f *= factor
                }
                _ => {}
            }
        }
        f
    }

    /// Moves the probe one step (except for the very first frame) and renders it.
    pub fn next_frame(&mut self) -> Frame {
        if self.acquired > 0 {
            self.step += 1;
            let m = self.spec.relative_motion(self.step).to_array();
            let scaled = Pose6DoF::from_array(m.map(|v| v * self.speed));
            self.pose = self.pose.compose(&scaled);
        }
        let mut frame = render_frame(&self.spec, self.acquired, &self.pose);
        let f = self.intensity_factor();
        if f != 1.0 {
            for v in &mut frame.intensities {
                *v = (*v as f64 * f).clamp(0.0, 1.0) as f32;
            }
        }
        self.acquired += 1;
        self.last = Some(self.pose);
        frame
    }

    /// Records whether the session accepted the last acquired frame.
    pub fn record(&mut self, accepted: bool) {
        if accepted {
            if let Some(p) = self.last {
                self.accepted.push(p);
            }
        }
    }

    pub fn apply(&mut self, action: OperatorAction) -> Result<(), ActionError> {
        match action {
            OperatorAction::SlowDown { factor } => {
                if !(factor > 0.0 && factor <= 1.0) {
                    return Err(ActionError::Factor(factor));
                }
                self.speed *= factor;
            }
            OperatorAction::Press { gain } => {
                if !(gain > 0.0 && gain <= 4.0) {
                    return Err(ActionError::Gain(gain));
                }
                self.contact_restored = true;
                self.gain = gain;
            }
            OperatorAction::Rescan { side, frames } => {
                let n = self.accepted.len();
                if frames == 0 || frames > n {
                    return Err(ActionError::Rescan {
                        wanted: frames,
                        accepted: n,
                    });
                }
                let back = self.accepted[n - frames];
                let dx = match side {
                    Side::Left => -RESCAN_OFFSET_MM,
                    Side::Right => RESCAN_OFFSET_MM,
                };
                self.pose = back.compose(&Pose6DoF::translation(dx, 0.0, 0.0));
                self.step = self.step.saturating_sub(frames);
            }
            OperatorAction::Reacquire => {
                self.pose = *self.accepted.last().ok_or(ActionError::NothingAccepted)?;
            }
        }
        Ok(())
    }
}
