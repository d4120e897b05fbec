//! Input attribution and uncertainty maps, with grayscale PNG export.

use serde::{Deserialize, Serialize};

use crate::mamba::TokenOrdering;
use crate::model::{PoseModel, WindowInput};
use crate::tensor::{Graph, Tensor};

use super::HitlError;

/// A non-negative per-pixel map with the frame's dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PixelMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Divides by the maximum when it is non-zero.
    pub fn normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
        self
    }

    /// Share of the total mass lying in the left half (0.5 for an empty map).
    pub fn left_share(&self) -> f64 {
        let half = self.width / 2;
        let (mut left, mut total) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.values[r * self.width + c];
                total += v;
                if c < half {
                    left += v;
                }
            }
        }
        if total > 0.0 {
            left / total
        } else {
            0.5
        }
    }

    /// 8-bit grayscale PNG of the max-normalised map.
    pub fn to_png(&self) -> Vec<u8> {
        let m = self.max();
        let px: Vec<u8> = self
            .values
            .iter()
            .map(|v| if m > 0.0 { (v / m * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
            .collect();
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("png header into memory");
            w.write_image_data(&px).expect("png data into memory");
        }
        out
    }
}

/// Gradient of the squared norm of the window's last pose with respect to
/// the last frame's pixels.
pub fn raw_saliency(
    model: &PoseModel,
    win: &WindowInput,
    orderings: (&TokenOrdering, &TokenOrdering),
) -> Result<Vec<f64>, HitlError> {
    let l = win.len();
    let s = model.config.frame_size;
    let data: Vec<f64> = win.pixels.iter().flat_map(|p| p.iter().copied()).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::new([l * s * s, 1], data)?)?;
    let tokens = model.tokens_from(&mut g, &model.store, x, l)?;
    let out = model.forward_from_tokens(&mut g, &model.store, tokens, win, orderings, None)?;
    let last = g.slice_rows(out.poses, l - 1, l)?;
    let energy = g.sum_squares(last)?;
    let grads = g.backward(energy)?;
    let gx = grads.wrt(x);
    Ok(gx.data()[(l - 1) * s * s..].to_vec())
}

/// `|d ||p_last||^2 / d I_last|`, normalised to a maximum of 1.
pub fn saliency(
    model: &PoseModel,
    win: &WindowInput,
    orderings: (&TokenOrdering, &TokenOrdering),
) -> Result<PixelMap, HitlError> {
    let s = model.config.frame_size;
    let raw = raw_saliency(model, win, orderings)?;
    Ok(PixelMap {
        width: s,
        height: s,
        values: raw.iter().map(|v| v.abs()).collect(),
    }
    .normalized())
}

/// Nearest-neighbour upsampling of per-cell values on a `grid x grid` layout.
pub fn uncertainty_heatmap(cell_variance: &[f64], grid: usize, width: usize, height: usize) -> PixelMap {
    let mut values = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            values.push(cell_variance[(r * grid / height) * grid + c * grid / width]);
        }
    }
    PixelMap { width, height, values }
}
