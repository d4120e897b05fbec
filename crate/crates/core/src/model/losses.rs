//! Training objectives: corner-point error, velocity consistency, stream
//! correlation and plain pose MSE, each as a value-level reference and as a
//! differentiable graph expression.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::pose::{CornerSet, PlaneExtent, Pose6DoF};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub point: f64,
    pub velocity: f64,
    pub corr: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            point: 1.0,
            velocity: 0.1,
            corr: 0.01,
            mse: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.point, self.velocity, self.corr, self.mse]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("loss weights must be finite and non-negative".into());
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(TensorError::Invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Mean squared corner distance over all frames and corners.
pub fn loss_point(pred: &[CornerSet], gt: &[CornerSet]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let mut acc = 0.0;
    for (p, q) in pred.iter().zip(gt) {
        for n in 0..4 {
            acc += (0..3).map(|k| (p.points[n][k] - q.points[n][k]).powi(2)).sum::<f64>();
        }
    }
    Ok(acc / (pred.len() * 4) as f64)
}

/// Mean norm of the mismatch between consecutive-pose differences.
pub fn loss_velocity(pred: &[Pose6DoF], gt: &[Pose6DoF]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.len() < 2 {
        return Err(TensorError::Invalid("velocity loss needs at least two poses".into()));
    }
    let mut acc = 0.0;
    for m in 1..pred.len() {
        let (p0, p1, g0, g1) = (pred[m - 1].to_array(), pred[m].to_array(), gt[m - 1].to_array(), gt[m].to_array());
        acc += (0..6).map(|k| ((p1[k] - p0[k]) - (g1[k] - g0[k])).powi(2)).sum::<f64>().sqrt();
    }
    Ok(acc / (pred.len() - 1) as f64)
}

/// Channels (columns) with variance above this threshold take part in the
/// correlation loss.
pub const MIN_CHANNEL_VARIANCE: f64 = 1e-12;

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += t.row(r)[c] / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            var[c] += (t.row(r)[c] - mean[c]).powi(2) / n as f64;
        }
    }
    (mean, var)
}

/// `1 - mean Pearson correlation` between matching columns; zero-variance
/// columns are skipped. Returns 0 when no column qualifies.
pub fn loss_corr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_corr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ma, va) = column_stats(a);
    let (mb, vb) = column_stats(b);
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..a.cols() {
        if va[c] <= MIN_CHANNEL_VARIANCE || vb[c] <= MIN_CHANNEL_VARIANCE {
            continue;
        }
        let cov = (0..a.rows())
            .map(|r| (a.row(r)[c] - ma[c]) * (b.row(r)[c] - mb[c]))
            .sum::<f64>()
            / a.rows() as f64;
        total += cov / (va[c] * vb[c]).sqrt();
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { 1.0 - total / used as f64 })
}

pub fn loss_mse(pred: &[Pose6DoF], gt: &[Pose6DoF]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let acc: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| p.to_array().iter().zip(q.to_array()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum();
    Ok(acc / (6 * pred.len()) as f64)
}

/// Flattened corners `[M, 12]` (corner-major, xyz) of poses given as `[M, 6]`
/// rows of `tx ty tz rx ry rz` with angles in degrees.
pub fn corners_graph(g: &mut Graph, poses: Var, extent: PlaneExtent) -> Result<Var> {
    if g.value(poses).cols() != 6 || g.shape(poses).len() != 2 {
        return Err(TensorError::Invalid("poses must be [M, 6]".into()));
    }
    let trans = g.slice_cols(poses, 0, 3)?;
    let angles = g.slice_cols(poses, 3, 6)?;
    let rad = g.scale(angles, std::f64::consts::PI / 180.0)?;
    let s = g.sin(rad)?;
    let c = g.cos(rad)?;
    let (sx, sy, sz) = (g.slice_cols(s, 0, 1)?, g.slice_cols(s, 1, 2)?, g.slice_cols(s, 2, 3)?);
    let (cx, cy, cz) = (g.slice_cols(c, 0, 1)?, g.slice_cols(c, 1, 2)?, g.slice_cols(c, 2, 3)?);
    // First two columns of Rz * Ry * Rx; corners lie in the z = 0 plane.
    let r00 = g.mul(cz, cy)?;
    let r10 = g.mul(sz, cy)?;
    let r20 = g.neg(sy)?;
    let szcx = g.mul(sz, cx)?;
    let czsy = g.mul(cz, sy)?;
    let czsysx = g.mul(czsy, sx)?;
    let r01 = g.sub(czsysx, szcx)?;
    let szsy = g.mul(sz, sy)?;
    let szsysx = g.mul(szsy, sx)?;
    let czcx = g.mul(cz, cx)?;
    let r11 = g.add(szsysx, czcx)?;
    let r21 = g.mul(cy, sx)?;
    let rot = g.concat_cols(&[r00, r10, r20, r01, r11, r21])?;
    let local = extent.corners();
    let mut k = vec![0.0; 6 * 12];
    let mut e = vec![0.0; 3 * 12];
    for (n, p) in local.iter().enumerate() {
        for axis in 0..3 {
            let col = n * 3 + axis;
            k[axis * 12 + col] = p[0];
            k[(3 + axis) * 12 + col] = p[1];
            e[axis * 12 + col] = 1.0;
        }
    }
    let k = g.constant(Tensor::new([6, 12], k)?)?;
    let e = g.constant(Tensor::new([3, 12], e)?)?;
    let rotated = g.matmul(rot, k)?;
    let shifted = g.matmul(trans, e)?;
    g.add(rotated, shifted)
}

pub fn corner_rows(sets: &[CornerSet]) -> Tensor {
    let data = sets.iter().flat_map(|s| s.points.iter().flatten().copied()).collect();
    Tensor::new([sets.len(), 12], data).expect("corner rows")
}

pub fn pose_rows(poses: &[Pose6DoF]) -> Tensor {
    Tensor::new([poses.len(), 6], poses.iter().flat_map(|p| p.to_array()).collect()).expect("pose rows")
}

pub fn point_loss_graph(g: &mut Graph, pred: Var, gt_corners: &Tensor, extent: PlaneExtent) -> Result<Var> {
    let pc = corners_graph(g, pred, extent)?;
    let gc = g.constant(gt_corners.clone())?;
    let diff = g.sub(pc, gc)?;
    let ss = g.sum_squares(diff)?;
    g.scale(ss, 1.0 / (4 * gt_corners.rows()) as f64)
}

pub fn velocity_loss_graph(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    let m = gt.rows();
    if m < 2 {
        return Err(TensorError::Invalid("velocity loss needs at least two poses".into()));
    }
    let mut d = vec![0.0; (m - 1) * m];
    for r in 0..m - 1 {
        d[r * m + r] = -1.0;
        d[r * m + r + 1] = 1.0;
    }
    let d = g.constant(Tensor::new([m - 1, m], d)?)?;
    let gt = g.constant(gt.clone())?;
    let err = g.sub(pred, gt)?;
    let dv = g.matmul(d, err)?;
    let norms = g.row_norms(dv)?;
    g.mean(norms)
}

pub fn corr_loss_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "loss_corr",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let (n, d) = (g.value(a).rows(), g.value(a).cols());
    let (_, va) = column_stats(g.value(a));
    let (_, vb) = column_stats(g.value(b));
    let keep: Vec<usize> = (0..d)
        .filter(|&c| va[c] > MIN_CHANNEL_VARIANCE && vb[c] > MIN_CHANNEL_VARIANCE)
        .collect();
    if keep.is_empty() {
        log::debug!("correlation loss: no channel with non-zero variance");
        return g.constant(Tensor::scalar(0.0));
    }
    if keep.len() < d {
        log::debug!("correlation loss: skipping {} flat channels", d - keep.len());
    }
    let idx: Rc<[usize]> = (0..n).flat_map(|r| keep.iter().map(move |&c| r * d + c)).collect();
    let k = keep.len();
    let a = g.gather(a, idx.clone(), vec![n, k])?;
    let b = g.gather(b, idx, vec![n, k])?;
    let mut center = vec![-1.0 / n as f64; n * n];
    for i in 0..n {
        center[i * n + i] += 1.0;
    }
    let center = g.constant(Tensor::new([n, n], center)?)?;
    let ac = g.matmul(center, a)?;
    let bc = g.matmul(center, b)?;
    let ones = g.constant(Tensor::full([1, n], 1.0))?;
    let ab = g.mul(ac, bc)?;
    let aa = g.mul(ac, ac)?;
    let bb = g.mul(bc, bc)?;
    let cov = g.matmul(ones, ab)?;
    let var_a = g.matmul(ones, aa)?;
    let var_b = g.matmul(ones, bb)?;
    let prod = g.mul(var_a, var_b)?;
    let denom = g.sqrt(prod)?;
    let corr = g.div(cov, denom)?;
    let mean = g.mean(corr)?;
    g.one_minus(mean)
}

pub fn mse_loss_graph(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    let n = gt.numel();
    let gt = g.constant(gt.clone())?;
    let diff = g.sub(pred, gt)?;
    let ss = g.sum_squares(diff)?;
    g.scale(ss, 1.0 / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub point: Var,
    pub velocity: Var,
    pub corr: Var,
    pub mse: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub point: f64,
    pub velocity: f64,
    pub corr: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            point: g.value(self.point).item(),
            velocity: g.value(self.velocity).item(),
            corr: g.value(self.corr).item(),
            mse: g.value(self.mse).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Weighted sum of the four objectives for one window of anchored poses.
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    gt: &[Pose6DoF],
    streams: (Var, Var),
    weights: &LossWeights,
    extent: PlaneExtent,
) -> Result<LossTerms> {
    let gt_rows = pose_rows(gt);
    let gt_corners = corner_rows(&crate::pose::propagate_corners(
        &crate::pose::Trajectory::new(gt.to_vec()).map_err(|e| TensorError::Invalid(e.to_string()))?,
        extent,
    ));
    let point = point_loss_graph(g, pred, &gt_corners, extent)?;
    let velocity = velocity_loss_graph(g, pred, &gt_rows)?;
    let corr = corr_loss_graph(g, streams.0, streams.1)?;
    let mse = mse_loss_graph(g, pred, &gt_rows)?;
    let parts = [point, velocity, corr, mse];
    let mut total: Option<Var> = None;
    for (v, w) in parts.iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        let term = g.scale(*v, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| TensorError::Invalid("all loss weights are zero".into()))?;
    Ok(LossTerms {
        point,
        velocity,
        corr,
        mse,
        total,
    })
}
