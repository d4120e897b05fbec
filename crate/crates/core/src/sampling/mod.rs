//! Spatial point sampling (farthest-point and nearest-point), contrastive
//! frame embeddings and density-based grouping of frames.

pub mod contrastive;
pub mod grouping;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::Frame;

pub use contrastive::{train_embedding, triplet_loss, ContrastiveConfig, ContrastiveEncoder, EncoderReport, SequenceView};
pub use grouping::{axial_velocities, dbscan, frame_labels, group_frames, label_groups, percentile_eps, FrameGroup, GroupLabel, GroupingConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("requested {requested} points from a set of {available}")]
    TooMany { requested: usize, available: usize },
    #[error("start index {0} out of range")]
    BadStart(usize),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    /// `(col, row)` pixel coordinates.
    pub points: Vec<(usize, usize)>,
    pub weights: Option<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<(usize, usize)>) -> Self {
        Self {
            points,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fraction of points falling in each cell of a `grid x grid` partition
    /// of a `width x height` frame, row-major; uniform when empty.
    pub fn cell_histogram(&self, width: usize, height: usize, grid: usize) -> Vec<f64> {
        let cells = grid * grid;
        if self.points.is_empty() {
            return vec![1.0 / cells as f64; cells];
        }
        let mut h = vec![0.0; cells];
        for &(c, r) in &self.points {
            let cell = (r * grid / height) * grid + c * grid / width;
            h[cell] += 1.0;
        }
        let n = self.points.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }
}

/// Greedy farthest-point order over `count` items under `dist`. Each new item
/// maximises its minimum distance to those already chosen; ties go to the
/// lowest index.
pub fn farthest_point_order<F>(count: usize, n: usize, start: usize, dist: F) -> Result<Vec<usize>, SamplingError>
where
    F: Fn(usize, usize) -> f64,
{
    if n > count || n == 0 {
        return Err(SamplingError::TooMany {
            requested: n,
            available: count,
        });
    }
    if start >= count {
        return Err(SamplingError::BadStart(start));
    }
    let mut chosen = vec![start];
    let mut taken = vec![false; count];
    taken[start] = true;
    let mut min_d: Vec<f64> = (0..count).map(|i| dist(start, i)).collect();
    while chosen.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..count {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("n <= count leaves a candidate");
        taken[b] = true;
        chosen.push(b);
        for i in 0..count {
            min_d[i] = min_d[i].min(dist(b, i));
        }
    }
    Ok(chosen)
}

fn pixel_dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Farthest-point selection of `n` points beginning at `points[start]`.
pub fn fps(points: &PointSet, n: usize, start: usize) -> Result<PointSet, SamplingError> {
    let p = &points.points;
    let order = farthest_point_order(p.len(), n, start, |i, j| pixel_dist(p[i], p[j]))?;
    Ok(PointSet {
        points: order.iter().map(|&i| p[i]).collect(),
        weights: points.weights.as_ref().map(|w| order.iter().map(|&i| w[i]).collect()),
    })
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude(frame: &Frame) -> Vec<f64> {
    let (w, h) = (frame.width, frame.height);
    let at = |c: usize, r: usize| frame.intensities[r * w + c] as f64;
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let gx = 0.5 * (at((c + 1).min(w - 1), r) - at(c.saturating_sub(1), r));
            let gy = 0.5 * (at(c, (r + 1).min(h - 1)) - at(c, r.saturating_sub(1)));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// 90th percentile of the gradient magnitudes, floored at a tiny positive value.
pub fn default_tau(frame: &Frame) -> f64 {
    let mut g = gradient_magnitude(frame);
    g.sort_by(f64::total_cmp);
    let idx = ((g.len() as f64 - 1.0) * 0.9).round() as usize;
    g[idx].max(1e-9)
}

/// Pixels whose gradient magnitude exceeds `tau`, with their magnitudes.
pub fn high_gradient_region(frame: &Frame, tau: f64) -> PointSet {
    let g = gradient_magnitude(frame);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, &m) in g.iter().enumerate() {
        if m > tau {
            points.push((i % frame.width, i / frame.width));
            weights.push(m);
        }
    }
    PointSet {
        points,
        weights: Some(weights),
    }
}

/// For every 3x3 local maximum of gradient magnitude inside the high-gradient
/// region, its `k` nearest high-gradient pixels (the maximum included).
pub fn nps(frame: &Frame, tau: f64, k: usize) -> Result<PointSet, SamplingError> {
    if !(tau > 0.0) {
        return Err(SamplingError::Invalid("tau_grad must be positive".into()));
    }
    if k == 0 {
        return Err(SamplingError::Invalid("k must be at least 1".into()));
    }
    let (w, h) = (frame.width, frame.height);
    let g = gradient_magnitude(frame);
    let region = high_gradient_region(frame, tau);
    let mut maxima = Vec::new();
    for &(c, r) in &region.points {
        let i = r * w + c;
        let mut is_max = true;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nc, nr) = (c as i64 + dx, r as i64 + dy);
                if (dx, dy) == (0, 0) || nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                // Plateaus keep only their first pixel in scan order.
                if g[j] > g[i] || (g[j] == g[i] && j < i) {
                    is_max = false;
                }
            }
        }
        if is_max {
            maxima.push((c, r));
        }
    }
    let mut seen = vec![false; w * h];
    let mut out = PointSet {
        points: Vec::new(),
        weights: Some(Vec::new()),
    };
    for m in maxima {
        let mut near: Vec<(f64, usize)> = region
            .points
            .iter()
            .enumerate()
            .map(|(idx, &p)| (pixel_dist(m, p), idx))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, idx) in near.iter().take(k) {
            let p = region.points[idx];
            let flat = p.1 * w + p.0;
            if !seen[flat] {
                seen[flat] = true;
                out.points.push(p);
                out.weights.as_mut().unwrap().push(g[flat]);
            }
        }
    }
    Ok(out)
}

/// Farthest-point selection over the high-gradient region, started at the
/// strongest-gradient pixel; at most `n` points.
pub fn fps_high_gradient(frame: &Frame, tau: f64, n: usize) -> PointSet {
    let region = high_gradient_region(frame, tau);
    if region.is_empty() {
        return region;
    }
    let w = region.weights.as_ref().unwrap();
    let start = (0..w.len()).fold(0, |b, i| if w[i] > w[b] { i } else { b });
    fps(&region, n.min(region.len()), start).expect("n clamped to region size")
}
