//! Monte-Carlo dropout statistics over repeated stochastic passes.

use serde::{Deserialize, Serialize};

use crate::mamba::TokenOrdering;
use crate::model::{DropoutPass, PoseModel, WindowInput};
use crate::model::pipeline::rows_to_poses;
use crate::pose::Pose6DoF;
use crate::tensor::{Graph, RngKey};

use super::gate::GateLevel;
use super::HitlError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub passes: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            passes: 16,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<(), HitlError> {
        if self.passes < 2 {
            return Err(HitlError::TooFewPasses(self.passes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HitlError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub frame: usize,
    /// Mean relative motion into the frame.
    pub mean: Pose6DoF,
    pub sigma2: f64,
    pub passes: usize,
    pub gate: GateLevel,
}

/// Component-wise sample mean.
pub fn mean_pose(samples: &[[f64; 6]]) -> [f64; 6] {
    let mut mu = [0.0; 6];
    for s in samples {
        for k in 0..6 {
            mu[k] += s[k] / samples.len() as f64;
        }
    }
    mu
}

/// `(1/K) * sum_k ||p_k - mean||^2` over the six components, with
/// rotations in degrees counted as millimetres.
pub fn pose_variance(samples: &[[f64; 6]]) -> f64 {
    if samples.iter().all(|s| *s == samples[0]) {
        return 0.0;
    }
    let mu = mean_pose(samples);
    samples
        .iter()
        .map(|s| s.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / samples.len() as f64
}

#[derive(Clone, Debug)]
pub struct McEstimate {
    /// Relative motion from the second-to-last to the last window frame, per pass.
    pub samples: Vec<[f64; 6]>,
    pub mean: [f64; 6],
    pub sigma2: f64,
    /// Variance across passes of each last-frame token's norm, one per grid cell.
    pub cell_variance: Vec<f64>,
}

/// Runs `cfg.passes` dropout passes over one window. Convolutional tokens
/// are computed once and shared by every pass.
pub fn mc_window(
    model: &PoseModel,
    win: &WindowInput,
    orderings: (&TokenOrdering, &TokenOrdering),
    cfg: &McConfig,
    key: RngKey,
) -> Result<McEstimate, HitlError> {
    cfg.validate()?;
    let l = win.len();
    if l < 2 {
        return Err(HitlError::Invalid("uncertainty needs a window of at least two frames".into()));
    }
    let tokens = {
        let mut g = Graph::new();
        let t = model.frame_tokens(&mut g, &model.store, &win.pixels)?;
        g.value(t).clone()
    };
    let cells = model.grid_cells();
    let mut samples = Vec::with_capacity(cfg.passes);
    let mut norms = vec![Vec::with_capacity(cfg.passes); cells];
    for k in 0..cfg.passes {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone())?;
        let pass = DropoutPass {
            rate: cfg.dropout,
            key: key.child("pass", k as u64),
        };
        let out = model.forward_from_tokens(&mut g, &model.store, t, win, orderings, Some(pass))?;
        let poses = rows_to_poses(g.value(out.poses));
        samples.push(poses[l - 2].inverse().compose(&poses[l - 1]).to_array());
        let tv = g.value(out.tokens);
        for (c, acc) in norms.iter_mut().enumerate() {
            let row = tv.row((l - 1) * cells + c);
            acc.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    let cell_variance = norms
        .iter()
        .map(|n| {
            let mu = n.iter().sum::<f64>() / n.len() as f64;
            n.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n.len() as f64
        })
        .collect();
    Ok(McEstimate {
        mean: mean_pose(&samples),
        sigma2: pose_variance(&samples),
        samples,
        cell_variance,
    })
}
