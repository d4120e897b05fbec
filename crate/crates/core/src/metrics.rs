//! Trajectory error metrics between a predicted and a reference sweep.
//!
//! Drift at frame `m` is the mean distance between corresponding corners of
//! the two frame planes. FDR and ADR normalise by the reference path length
//! in mm; ADR averages `d_m / path_m` over frames whose path is non-zero.

use serde::{Deserialize, Serialize};

use crate::pose::{distance, propagate_corners, wrap_degrees, PlaneExtent, Trajectory};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trajectories need at least two frames")]
    TooShort,
    #[error("reference path length is zero; FDR and ADR are undefined")]
    ZeroPath,
    #[error("no reports to aggregate")]
    Empty,
}

pub const METRIC_NAMES: [&str; 8] = ["DE", "FD", "FDR", "ADR", "MD", "SD", "HD", "MEA"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sequence: String,
    pub frames: usize,
    /// mm
    pub de: f64,
    pub fd: f64,
    /// percent of reference path length
    pub fdr: f64,
    pub adr: f64,
    pub md: f64,
    pub sd: f64,
    pub hd: f64,
    /// degrees
    pub mea: f64,
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 8] {
        [self.de, self.fd, self.fdr, self.adr, self.md, self.sd, self.hd, self.mea]
    }

    fn with_values(sequence: String, frames: usize, v: [f64; 8]) -> Self {
        Self {
            sequence,
            frames,
            de: v[0],
            fd: v[1],
            fdr: v[2],
            adr: v[3],
            md: v[4],
            sd: v[5],
            hd: v[6],
            mea: v[7],
        }
    }
}

/// Mean corner distance per frame.
pub fn frame_drift(pred: &Trajectory, gt: &Trajectory, extent: PlaneExtent) -> Result<Vec<f64>, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    let (a, b) = (propagate_corners(pred, extent), propagate_corners(gt, extent));
    Ok(a.iter()
        .zip(&b)
        .map(|(p, q)| (0..4).map(|n| distance(&p.points[n], &q.points[n])).sum::<f64>() / 4.0)
        .collect())
}

/// Symmetric Hausdorff distance between two point clouds.
pub fn hausdorff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| distance(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

pub fn compute_metrics(
    pred: &Trajectory,
    gt: &Trajectory,
    extent: PlaneExtent,
    sequence: &str,
) -> Result<MetricsReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if gt.len() < 2 {
        return Err(MetricsError::TooShort);
    }
    let drift = frame_drift(pred, gt, extent)?;
    let path = gt.cumulative_path();
    let total = *path.last().expect("non-empty");
    if !(total > 0.0) {
        return Err(MetricsError::ZeroPath);
    }
    let m = drift.len() as f64;
    let sd: f64 = drift.iter().sum();
    let fd = *drift.last().expect("non-empty");
    let md = drift.iter().copied().fold(0.0, f64::max);
    let ratios: Vec<f64> = drift
        .iter()
        .zip(&path)
        .filter(|(_, p)| **p > 0.0)
        .map(|(d, p)| d / p)
        .collect();
    let adr = 100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64;
    let cloud = |t: &Trajectory| -> Vec<[f64; 3]> {
        propagate_corners(t, extent).iter().flat_map(|c| c.points).collect()
    };
    let hd = hausdorff(&cloud(pred), &cloud(gt));
    let mut angle_err = 0.0;
    for (p, q) in pred.poses().iter().zip(gt.poses()).skip(1) {
        angle_err += (wrap_degrees(p.rx - q.rx).abs() + wrap_degrees(p.ry - q.ry).abs() + wrap_degrees(p.rz - q.rz).abs())
            / 3.0;
    }
    let mea = angle_err / (gt.len() - 1) as f64;
    Ok(MetricsReport::with_values(
        sequence.to_string(),
        gt.len(),
        [sd / m, fd, 100.0 * fd / total, adr, md, sd, hd, mea],
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub mean: MetricsReport,
    /// Population standard deviation per metric.
    pub std: MetricsReport,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 8];
    for r in reports {
        for (acc, v) in mean.iter_mut().zip(r.values()) {
            *acc += v / n;
        }
    }
    let mut var = [0.0; 8];
    for r in reports {
        for (k, v) in r.values().iter().enumerate() {
            var[k] += (v - mean[k]).powi(2) / n;
        }
    }
    let frames = reports.iter().map(|r| r.frames).sum::<usize>() / reports.len();
    Ok(AggregateReport {
        count: reports.len(),
        mean: MetricsReport::with_values("mean".into(), frames, mean),
        std: MetricsReport::with_values("std".into(), frames, var.map(f64::sqrt)),
    })
}

/// CSV with one row per report.
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sequence", "frames"];
    header.extend(METRIC_NAMES);
    w.write_record(&header).expect("in-memory write");
    for r in reports {
        let mut row = vec![r.sequence.clone(), r.frames.to_string()];
        row.extend(r.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn to_json(reports: &[MetricsReport], summary: Option<&AggregateReport>) -> String {
    serde_json::to_string_pretty(&serde_json::json!({ "sequences": reports, "aggregate": summary }))
        .expect("metrics serialise")
}

/// Aligned text table; a trailing `mean ± std` row when a summary is given.
pub fn format_table(reports: &[MetricsReport], summary: Option<&AggregateReport>) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.sequence.len())
        .chain([8])
        .max()
        .unwrap_or(8);
    let col = 17;
    let mut out = format!("{:<name_w$}", "sequence");
    for n in METRIC_NAMES {
        out.push_str(&format!(" {n:>col$}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<name_w$}", r.sequence));
        for v in r.values() {
            out.push_str(&format!(" {v:>col$.3}"));
        }
        out.push('\n');
    }
    if let Some(s) = summary {
        out.push_str(&format!("{:<name_w$}", "mean±std"));
        for (m, d) in s.mean.values().iter().zip(s.std.values()) {
            out.push_str(&format!(" {:>col$}", format!("{m:.3} ± {d:.3}")));
        }
        out.push('\n');
    }
    out
}
