//! Three-level safety gate and its quantile calibration.

use serde::{Deserialize, Serialize};

use super::HitlError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateLevel {
    Safe,
    Caution,
    Critical,
}

impl GateLevel {
    pub const ALL: [GateLevel; 3] = [GateLevel::Safe, GateLevel::Caution, GateLevel::Critical];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
}

impl Thresholds {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self, HitlError> {
        if !(tau1.is_finite() && tau2.is_finite() && 0.0 < tau1 && tau1 < tau2) {
            return Err(HitlError::InvalidThresholds { tau1, tau2 });
        }
        Ok(Self { tau1, tau2 })
    }

    /// Thresholds that never fire, for observing raw uncertainty.
    pub fn permissive() -> Self {
        Self {
            tau1: f64::MAX / 2.0,
            tau2: f64::MAX,
        }
    }
}

/// `sigma2 < tau1` is safe, `tau1 <= sigma2 < tau2` caution, `sigma2 >= tau2`
/// critical. A NaN variance is critical.
pub fn gate(sigma2: f64, t: &Thresholds) -> GateLevel {
    if sigma2 >= t.tau2 || sigma2.is_nan() {
        GateLevel::Critical
    } else if sigma2 >= t.tau1 {
        GateLevel::Caution
    } else {
        GateLevel::Safe
    }
}

/// Linearly interpolated quantile of an ascending slice.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const DEFAULT_QUANTILES: (f64, f64) = (0.80, 0.95);

/// Thresholds at the given quantiles of validation variances.
pub fn calibrate_thresholds(sigma2: &[f64], safe_q: f64, critical_q: f64) -> Result<Thresholds, HitlError> {
    if !(0.0 < safe_q && safe_q < critical_q && critical_q < 1.0) {
        return Err(HitlError::InvalidQuantiles(safe_q, critical_q));
    }
    if sigma2.is_empty() {
        return Err(HitlError::Empty);
    }
    let mut v = sigma2.to_vec();
    v.sort_by(f64::total_cmp);
    Thresholds::new(empirical_quantile(&v, safe_q), empirical_quantile(&v, critical_q))
}
