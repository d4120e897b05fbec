//! Layers built from graph primitives. Images are laid out as
//! `[batch * height * width, channels]`, one row per pixel.

use std::rc::Rc;

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, RngKey, Tensor, Var, PAD};

pub fn uniform_init(shape: &[usize], bound: f64, key: RngKey) -> Tensor {
    let mut rng = key.rng();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform init with bound `gain / sqrt(fan_in)`; zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, key: RngKey) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(&[fan_in, fan_out], bound, key));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }
}

/// 3x3 convolution, stride 2, zero padding 1, followed by ReLU.
#[derive(Clone, Debug)]
pub struct Conv {
    pub linear: Linear,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Spatial geometry of a batch of feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl MapDims {
    pub fn halved(self) -> Self {
        Self {
            batch: self.batch,
            height: self.height.div_ceil(2),
            width: self.width.div_ceil(2),
        }
    }
}

fn im2col_index(dims: MapDims, channels: usize) -> Rc<[usize]> {
    let out = dims.halved();
    let mut idx = Vec::with_capacity(out.batch * out.height * out.width * 9 * channels);
    for b in 0..dims.batch {
        for oy in 0..out.height {
            for ox in 0..out.width {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as i64 - 1;
                        let ix = (2 * ox + kx) as i64 - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < dims.height && (ix as usize) < dims.width;
                        for c in 0..channels {
                            idx.push(if inside {
                                ((b * dims.height + iy as usize) * dims.width + ix as usize) * channels + c
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, key: RngKey) -> Self {
        Self {
            linear: Linear::new(store, name, 9 * in_channels, out_channels, 6f64.sqrt(), key),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dims: MapDims) -> Result<(Var, MapDims)> {
        let out = dims.halved();
        let cols = g.gather(
            x,
            im2col_index(dims, self.in_channels),
            vec![out.batch * out.height * out.width, 9 * self.in_channels],
        )?;
        let y = self.linear.forward(g, store, cols)?;
        Ok((g.relu(y)?, out))
    }
}

/// Averages each image's pixels: `[batch * pixels, c] -> [batch, c]`.
pub fn global_average(g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
    let c = g.value(x).cols();
    let pixels = g.value(x).rows() / batch;
    let flat = g.reshape(x, vec![batch, pixels * c])?;
    let mut pool = vec![0.0; pixels * c * c];
    for p in 0..pixels {
        for ch in 0..c {
            pool[(p * c + ch) * c + ch] = 1.0 / pixels as f64;
        }
    }
    let pool = g.constant(Tensor::new([pixels * c, c], pool)?)?;
    g.matmul(flat, pool)
}
