//! Block-matching optical flow with a Lucas–Kanade refinement.
//!
//! The field follows the convention `a(p) ≈ b(p + flow(p))`: content that
//! moves right between `a` and `b` produces positive `u`.

use thiserror::Error;

use crate::synth::Frame;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("frame sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("grid {grid} does not divide {width}x{height}")]
    Grid { grid: usize, width: usize, height: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    pub block: usize,
    pub search: i32,
    pub refine_iters: usize,
    /// Gradient-energy half-saturation constant of the confidence map.
    pub kappa: f64,
    /// Blocks with less gradient energy than this are untrusted.
    pub min_energy: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            block: 8,
            search: 7,
            refine_iters: 2,
            kappa: 2e-3,
            min_energy: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![0.0; n],
            v: vec![0.0; n],
            confidence: vec![0.0; n],
        }
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64, confidence: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
            confidence: vec![confidence; n],
        }
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| u.hypot(*v))
            .sum::<f64>()
            / self.u.len() as f64
    }

    /// Component-wise medians over pixels with confidence above `min_conf`
    /// whose distance to the border is at least `margin`.
    pub fn interior_median(&self, margin: usize, min_conf: f64) -> Option<(f64, f64)> {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for r in margin..self.height.saturating_sub(margin) {
            for c in margin..self.width.saturating_sub(margin) {
                let i = r * self.width + c;
                if self.confidence[i] > min_conf {
                    us.push(self.u[i]);
                    vs.push(self.v[i]);
                }
            }
        }
        Some((median(&mut us)?, median(&mut vs)?))
    }
}

pub fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

struct Image<'a> {
    w: usize,
    h: usize,
    px: &'a [f64],
}

impl Image<'_> {
    fn get(&self, c: i64, r: i64) -> Option<f64> {
        if c < 0 || r < 0 || c >= self.w as i64 || r >= self.h as i64 {
            None
        } else {
            Some(self.px[r as usize * self.w + c as usize])
        }
    }

    fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if x < 0.0 || y < 0.0 || x > (self.w - 1) as f64 || y > (self.h - 1) as f64 {
            return None;
        }
        let (x0, y0) = (x.floor().min((self.w - 2) as f64), y.floor().min((self.h - 2) as f64));
        let (fx, fy) = (x - x0, y - y0);
        let (c, r) = (x0 as usize, y0 as usize);
        let at = |cc: usize, rr: usize| self.px[rr * self.w + cc];
        Some(
            (1.0 - fy) * ((1.0 - fx) * at(c, r) + fx * at(c + 1, r))
                + fy * ((1.0 - fx) * at(c, r + 1) + fx * at(c + 1, r + 1)),
        )
    }

    fn gradient(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let gx = (self.bilinear(x + 0.5, y)? - self.bilinear(x - 0.5, y)?) / 1.0;
        let gy = (self.bilinear(x, y + 0.5)? - self.bilinear(x, y - 0.5)?) / 1.0;
        Some((gx, gy))
    }
}

fn zncc(a: &Image, b: &Image, c0: usize, r0: usize, n: usize, dx: i64, dy: i64) -> Option<f64> {
    let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut k) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for r in r0..r0 + n {
        for c in c0..c0 + n {
            let Some(vb) = b.get(c as i64 + dx, r as i64 + dy) else {
                continue;
            };
            let va = a.px[r * a.w + c];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
            k += 1;
        }
    }
    if k * 2 < n * n {
        return None;
    }
    let kf = k as f64;
    let cov = sab - sa * sb / kf;
    let va = saa - sa * sa / kf;
    let vb = sbb - sb * sb / kf;
    if va <= 1e-12 || vb <= 1e-12 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Gain-invariant least-squares update of a sub-pixel displacement.
fn refine(a: &Image, b: &Image, c0: usize, r0: usize, n: usize, d: (f64, f64)) -> (f64, f64) {
    let mut samples = Vec::with_capacity(n * n);
    for r in r0..r0 + n {
        for c in c0..c0 + n {
            let (x, y) = (c as f64 + d.0, r as f64 + d.1);
            if let (Some(vb), Some(g)) = (b.bilinear(x, y), b.gradient(x, y)) {
                samples.push((a.px[r * a.w + c], vb, g));
            }
        }
    }
    if samples.len() * 2 < n * n {
        return d;
    }
    let k = samples.len() as f64;
    let stats = |f: &dyn Fn(&(f64, f64, (f64, f64))) -> f64| {
        let m = samples.iter().map(f).sum::<f64>() / k;
        let s = (samples.iter().map(|x| (f(x) - m).powi(2)).sum::<f64>() / k).sqrt();
        (m, s)
    };
    let (ma, sa) = stats(&|x| x.0);
    let (mb, sb) = stats(&|x| x.1);
    if sa < 1e-9 || sb < 1e-9 {
        return d;
    }
    let (mut gxx, mut gxy, mut gyy, mut ex, mut ey) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(va, vb, (gx, gy)) in &samples {
        let e = (va - ma) / sa - (vb - mb) / sb;
        let (gx, gy) = (gx / sb, gy / sb);
        gxx += gx * gx;
        gxy += gx * gy;
        gyy += gy * gy;
        ex += gx * e;
        ey += gy * e;
    }
    let det = gxx * gyy - gxy * gxy;
    if det.abs() < 1e-12 {
        return d;
    }
    let step = ((gyy * ex - gxy * ey) / det, (gxx * ey - gxy * ex) / det);
    let clamp = |s: f64| s.clamp(-1.0, 1.0);
    (d.0 + clamp(step.0), d.1 + clamp(step.1))
}

fn gradient_energy(a: &Image, c0: usize, r0: usize, n: usize) -> f64 {
    let mut e = 0.0;
    let mut k = 0usize;
    for r in r0..r0 + n {
        for c in c0..c0 + n {
            let (c, r) = (c as i64, r as i64);
            let gx = a.get(c + 1, r).zip(a.get(c - 1, r)).map(|(p, m)| 0.5 * (p - m));
            let gy = a.get(c, r + 1).zip(a.get(c, r - 1)).map(|(p, m)| 0.5 * (p - m));
            if let (Some(gx), Some(gy)) = (gx, gy) {
                e += gx * gx + gy * gy;
                k += 1;
            }
        }
    }
    if k == 0 {
        0.0
    } else {
        e / k as f64
    }
}

fn to_f64(f: &Frame) -> Vec<f64> {
    f.intensities.iter().map(|&v| v as f64).collect()
}

pub fn estimate_flow(a: &Frame, b: &Frame) -> Result<FlowField, FlowError> {
    estimate_flow_with(a, b, &FlowParams::default())
}

pub fn estimate_flow_with(a: &Frame, b: &Frame, params: &FlowParams) -> Result<FlowField, FlowError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(FlowError::DimensionMismatch((a.width, a.height), (b.width, b.height)));
    }
    let (w, h) = (a.width, a.height);
    let (pa, pb) = (to_f64(a), to_f64(b));
    let ia = Image { w, h, px: &pa };
    let ib = Image { w, h, px: &pb };
    let n = params.block;
    let mut field = FlowField::zeros(w, h);
    for r0 in (0..h).step_by(n) {
        for c0 in (0..w).step_by(n) {
            let bn = n.min(w - c0).min(h - r0);
            let energy = gradient_energy(&ia, c0, r0, bn);
            let mut best: Option<(f64, i64, i64)> = None;
            if energy >= params.min_energy {
                for dy in -params.search..=params.search {
                    for dx in -params.search..=params.search {
                        let Some(s) = zncc(&ia, &ib, c0, r0, bn, dx as i64, dy as i64) else {
                            continue;
                        };
                        let better = match best {
                            None => true,
                            // Ties prefer the smaller displacement.
                            Some((bs, bx, by)) => {
                                s > bs + 1e-12
                                    || ((s - bs).abs() <= 1e-12 && dx * dx + dy * dy < (bx * bx + by * by) as i32)
                            }
                        };
                        if better {
                            best = Some((s, dx as i64, dy as i64));
                        }
                    }
                }
            }
            let (d, conf) = match best {
                Some((score, dx, dy)) if score > 0.0 => {
                    let mut d = (dx as f64, dy as f64);
                    for _ in 0..params.refine_iters {
                        d = refine(&ia, &ib, c0, r0, bn, d);
                    }
                    let lim = params.search as f64 + 1.0;
                    (
                        (d.0.clamp(-lim, lim), d.1.clamp(-lim, lim)),
                        energy / (energy + params.kappa),
                    )
                }
                _ => ((0.0, 0.0), 0.0),
            };
            for r in r0..(r0 + n).min(h) {
                for c in c0..(c0 + n).min(w) {
                    let i = r * w + c;
                    field.u[i] = d.0;
                    field.v[i] = d.1;
                    field.confidence[i] = conf;
                }
            }
        }
    }
    Ok(field)
}

/// Flow between every consecutive pair; entry `m` is the flow from frame `m` to `m + 1`.
pub fn sequence_flows(frames: &[Frame]) -> Result<Vec<FlowField>, FlowError> {
    frames.windows(2).map(|p| estimate_flow(&p[0], &p[1])).collect()
}

/// Per-cell means of (u, v, confidence) on a `grid x grid` partition, shape `[grid, grid, 3]`.
pub fn flow_features(field: &FlowField, grid: usize) -> Result<Tensor, FlowError> {
    if grid == 0 || !field.width.is_multiple_of(grid) || !field.height.is_multiple_of(grid) {
        return Err(FlowError::Grid {
            grid,
            width: field.width,
            height: field.height,
        });
    }
    let (cw, ch) = (field.width / grid, field.height / grid);
    let area = (cw * ch) as f64;
    let mut out = vec![0.0; grid * grid * 3];
    for r in 0..field.height {
        for c in 0..field.width {
            let i = r * field.width + c;
            let cell = (r / ch) * grid + c / cw;
            out[cell * 3] += field.u[i] / area;
            out[cell * 3 + 1] += field.v[i] / area;
            out[cell * 3 + 2] += field.confidence[i] / area;
        }
    }
    Ok(Tensor::new([grid, grid, 3], out).expect("grid tensor shape"))
}
