//! The pose network: per-frame convolutional tokens blended with flow
//! tokens, pooled by the two spatial samplers, a windowed state-space scan,
//! the dual-ordering scans, cross-attention and a regression head.
//!
//! The head regresses one 6-vector increment per frame; a fixed cumulative
//! sum turns increments into poses anchored at the window's first frame,
//! whose pose is therefore exactly the identity.

pub mod attention;
pub mod features;
pub mod losses;
pub mod pipeline;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::mamba::{DualSsm, Ssm, TokenOrdering};
use crate::nn::{Conv, Linear, MapDims};
use crate::sampling::GroupLabel;
use crate::tensor::{dropout_mask, Graph, ParamStore, Result, RngKey, Tensor, TensorError, Var};

pub use attention::CrossAttention;
pub use features::{blend_flow, embed_patches, positional_encoding};
pub use losses::{LossValues, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub conv_channels: [usize; 4],
    /// Width of patch and flow tokens.
    pub token_dim: usize,
    pub state_dim: usize,
    /// Width of the scan outputs and of the attention tokens.
    pub out_dim: usize,
    /// Length of the causal window after which the inner scan state resets.
    pub inner_window: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Points kept by farthest-point pooling.
    pub fps_points: usize,
    /// Neighbours gathered around each gradient maximum by nearest-point pooling.
    pub nps_neighbours: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            conv_channels: [8, 16, 16, 32],
            token_dim: 32,
            state_dim: 16,
            out_dim: 32,
            inner_window: 4,
            head_hidden: 64,
            dropout: 0.1,
            fps_points: 16,
            nps_neighbours: 8,
        }
    }
}

impl ModelConfig {
    /// Side of the token grid after four stride-2 convolutions.
    pub fn grid(&self) -> usize {
        self.frame_size / 16
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.frame_size < 16 || !self.frame_size.is_multiple_of(16) {
            return Err("frame_size must be a positive multiple of 16".into());
        }
        if self.conv_channels.contains(&0)
            || [self.token_dim, self.state_dim, self.out_dim, self.inner_window, self.head_hidden].contains(&0)
        {
            return Err("model dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        if self.fps_points == 0 || self.nps_neighbours == 0 {
            return Err("sampler sizes must be positive".into());
        }
        Ok(())
    }
}

/// Everything the network consumes for one frame besides its pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameAux {
    /// Pooled flow into this frame, `[grid * grid, 3]` rows of `(u, v, conf)`.
    pub flow: Vec<f64>,
    pub fps_weights: Vec<f64>,
    pub nps_weights: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// One window: intensities (already centred), auxiliary inputs and labels.
pub struct WindowInput<'a> {
    pub pixels: Vec<&'a [f64]>,
    pub aux: Vec<&'a FrameAux>,
    pub labels: Vec<GroupLabel>,
}

impl WindowInput<'_> {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Stochastic-pass settings: dropout rate and the key its masks derive from.
#[derive(Clone, Copy, Debug)]
pub struct DropoutPass {
    pub rate: f64,
    pub key: RngKey,
}

#[derive(Clone, Copy, Debug)]
pub struct WindowOutput {
    pub poses: Var,
    pub increments: Var,
    pub fps_stream: Var,
    pub nps_stream: Var,
    pub gate: Var,
    pub attention: Var,
    pub blend: Var,
    /// Blended patch tokens after dropout.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct PoseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    convs: Vec<Conv>,
    patch_proj: Linear,
    flow_proj: Linear,
    blend: Linear,
    inner: Ssm,
    dual: DualSsm,
    attention: CrossAttention,
    head_hidden: Linear,
    head_out: Linear,
}

impl PoseModel {
    pub fn new(config: ModelConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut store = ParamStore::new();
        let key = RngKey::new(seed).child("pose-model", 0);
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv::new(&mut store, &format!("conv{i}"), cin, c, key.child("conv", i as u64)));
            cin = c;
        }
        let d = config.token_dim;
        let patch_proj = Linear::new(&mut store, "patch", cin, d, 1.0, key.child("patch", 0));
        let flow_proj = Linear::new(&mut store, "flow", 3, d, 1.0, key.child("flow", 0));
        let blend = Linear::new(&mut store, "blend", 2 * d, d, 1.0, key.child("blend", 0));
        let inner = Ssm::new(
            &mut store,
            "inner",
            2 * d + GroupLabel::ALL.len(),
            config.state_dim,
            config.out_dim,
            key.child("inner", 0),
        );
        let dual = DualSsm::new(&mut store, "dual", config.out_dim, config.state_dim, key.child("dual", 0));
        let attention = CrossAttention::new(&mut store, "attn", config.out_dim, key.child("attn", 0));
        let head_hidden = Linear::new(
            &mut store,
            "head.hidden",
            config.out_dim,
            config.head_hidden,
            6f64.sqrt(),
            key.child("head", 0),
        );
        let head_out = Linear::new(&mut store, "head.out", config.head_hidden, 6, 1.0, key.child("head", 1));
        Ok(Self {
            config,
            store,
            convs,
            patch_proj,
            flow_proj,
            blend,
            inner,
            dual,
            attention,
            head_hidden,
            head_out,
        })
    }

    pub fn grid_cells(&self) -> usize {
        self.config.grid() * self.config.grid()
    }

    /// Patch tokens `[L * cells, token_dim]` with position codes.
    pub fn frame_tokens(&self, g: &mut Graph, store: &ParamStore, pixels: &[&[f64]]) -> Result<Var> {
        let s = self.config.frame_size;
        let mut data = Vec::with_capacity(pixels.len() * s * s);
        for p in pixels {
            if p.len() != s * s {
                return Err(TensorError::Invalid(format!("frame has {} pixels, expected {}", p.len(), s * s)));
            }
            data.extend_from_slice(p);
        }
        let x = g.constant(Tensor::new([pixels.len() * s * s, 1], data)?)?;
        self.tokens_from(g, store, x, pixels.len())
    }

    /// Like [`Self::frame_tokens`] but from an existing graph node of shape
    /// `[L * size * size, 1]` (used for input attribution).
    pub fn tokens_from(&self, g: &mut Graph, store: &ParamStore, x: Var, frames: usize) -> Result<Var> {
        let s = self.config.frame_size;
        let mut dims = MapDims {
            batch: frames,
            height: s,
            width: s,
        };
        let mut h = x;
        for conv in &self.convs {
            (h, dims) = conv.forward(g, store, h, dims)?;
        }
        embed_patches(g, store, &self.patch_proj, h, dims, 1)
    }

    /// Runs everything after the patch tokens.
    pub fn forward_from_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        win: &WindowInput,
        orderings: (&TokenOrdering, &TokenOrdering),
        dropout: Option<DropoutPass>,
    ) -> Result<WindowOutput> {
        let l = win.len();
        let cells = self.grid_cells();
        let d = self.config.token_dim;
        if g.value(tokens).rows() != l * cells {
            return Err(TensorError::Invalid("token count does not match window".into()));
        }
        // The window's first frame has no predecessor inside the window.
        let mut flow = vec![0.0; cells * 3];
        for a in &win.aux[1..] {
            flow.extend_from_slice(&a.flow);
        }
        let flow = g.constant(Tensor::new([l * cells, 3], flow)?)?;
        let flow_tokens = self.flow_proj.forward(g, store, flow)?;
        let (blended, blend) = blend_flow(g, store, &self.blend, tokens, flow_tokens)?;
        let blended = match dropout {
            Some(p) if p.rate > 0.0 => {
                let mask = dropout_mask(&[l * cells, d], p.rate, p.key.child("tokens", 0))?;
                g.dropout(blended, &mask)?
            }
            _ => blended,
        };
        // Per-frame pooling matrices from the two samplers' cell histograms.
        let pool = |which: fn(&FrameAux) -> &Vec<f64>| -> Result<Tensor> {
            let mut m = vec![0.0; l * l * cells];
            for (t, a) in win.aux.iter().enumerate() {
                let w = which(a);
                if w.len() != cells {
                    return Err(TensorError::Invalid("pooling weights do not match the token grid".into()));
                }
                m[t * l * cells + t * cells..t * l * cells + (t + 1) * cells].copy_from_slice(w);
            }
            Tensor::new([l, l * cells], m)
        };
        let pf = g.constant(pool(|a| &a.fps_weights)?)?;
        let pn = g.constant(pool(|a| &a.nps_weights)?)?;
        let fps_pooled = g.matmul(pf, blended)?;
        let nps_pooled = g.matmul(pn, blended)?;
        let labels: Vec<f64> = win.labels.iter().flat_map(|lab| lab.one_hot()).collect();
        let labels = g.constant(Tensor::new([l, GroupLabel::ALL.len()], labels)?)?;
        let frame_feats = g.concat_cols(&[fps_pooled, nps_pooled, labels])?;
        let inner = self.inner.forward(g, store, frame_feats, Some(self.config.inner_window))?;
        let dual = self.dual.forward(g, store, inner, orderings.0, orderings.1)?;
        let attn = self.attention.forward(g, store, dual.fps, dual.nps)?;
        let head_in = g.add(attn.output, dual.fused)?;
        let hidden = self.head_hidden.forward(g, store, head_in)?;
        let hidden = g.relu(hidden)?;
        let hidden = match dropout {
            Some(p) if p.rate > 0.0 => {
                let mask = dropout_mask(&[l, self.config.head_hidden], p.rate, p.key.child("head", 0))?;
                g.dropout(hidden, &mask)?
            }
            _ => hidden,
        };
        let increments = self.head_out.forward(g, store, hidden)?;
        let mut cum = vec![0.0; l * l];
        for m in 1..l {
            for k in 1..=m {
                cum[m * l + k] = 1.0;
            }
        }
        let cum = g.constant(Tensor::new([l, l], cum)?)?;
        let poses = g.matmul(cum, increments)?;
        Ok(WindowOutput {
            poses,
            increments,
            fps_stream: dual.fps,
            nps_stream: dual.nps,
            gate: dual.gate,
            attention: attn.weights,
            blend,
            tokens: blended,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        win: &WindowInput,
        orderings: (&TokenOrdering, &TokenOrdering),
        dropout: Option<DropoutPass>,
    ) -> Result<WindowOutput> {
        let tokens = self.frame_tokens(g, store, &win.pixels)?;
        self.forward_from_tokens(g, store, tokens, win, orderings, dropout)
    }

    /// Keeps every scan's transition matrix within the unit spectral radius.
    pub fn project(&mut self) {
        self.inner.project(&mut self.store);
        self.dual.project(&mut self.store);
    }

    pub fn max_spectral_radius(&self) -> f64 {
        [&self.inner, &self.dual.fps, &self.dual.nps]
            .iter()
            .map(|s| s.spectral_radius(&self.store))
            .fold(0.0, f64::max)
    }

    /// Parameters of the head's output layer (zeroing them yields identity poses).
    pub fn head_output(&self) -> &Linear {
        &self.head_out
    }

    /// Parameters of the first convolution, the only path from pixels onward.
    pub fn input_conv(&self) -> &Linear {
        &self.convs[0].linear
    }

    pub fn flow_projection(&self) -> &Linear {
        &self.flow_proj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::derive_orderings;
    use crate::sampling::GroupLabel;

    pub(crate) fn toy_window(model: &PoseModel, len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<FrameAux>) {
        use rand::Rng;
        let mut rng = RngKey::new(seed).rng();
        let s = model.config.frame_size;
        let cells = model.grid_cells();
        let pixels = (0..len).map(|_| (0..s * s).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        let aux = (0..len)
            .map(|_| FrameAux {
                flow: (0..cells * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                fps_weights: vec![1.0 / cells as f64; cells],
                nps_weights: (0..cells).map(|c| if c == 0 { 1.0 } else { 0.0 }).collect(),
                embedding: (0..4).map(|_| rng.random::<f64>()).collect(),
            })
            .collect();
        (pixels, aux)
    }

    fn run(model: &PoseModel, pixels: &[Vec<f64>], aux: &[FrameAux], dropout: Option<DropoutPass>) -> Tensor {
        let win = WindowInput {
            pixels: pixels.iter().map(Vec::as_slice).collect(),
            aux: aux.iter().collect(),
            labels: vec![GroupLabel::Forward; pixels.len()],
        };
        let emb: Vec<Vec<f64>> = aux.iter().map(|a| a.embedding.clone()).collect();
        let (f, n) = derive_orderings(&emb);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &model.store, &win, (&f, &n), dropout).unwrap();
        g.value(out.poses).clone()
    }

    #[test]
    fn first_row_is_identity_and_zero_head_gives_identity() {
        let mut model = PoseModel::new(ModelConfig::default(), 3).unwrap();
        let (pixels, aux) = toy_window(&model, 5, 1);
        let poses = run(&model, &pixels, &aux, None);
        assert_eq!(poses.shape(), &[5, 6]);
        assert!(poses.row(0).iter().all(|v| *v == 0.0));
        assert!(poses.data().iter().any(|v| *v != 0.0));
        let head = model.head_output().clone();
        for id in [head.weight, head.bias] {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(run(&model, &pixels, &aux, None).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_passes_are_keyed() {
        let model = PoseModel::new(ModelConfig::default(), 4).unwrap();
        let (pixels, aux) = toy_window(&model, 4, 2);
        let pass = |i| {
            Some(DropoutPass {
                rate: 0.1,
                key: RngKey::new(9).child("mc", i),
            })
        };
        assert_eq!(run(&model, &pixels, &aux, None), run(&model, &pixels, &aux, None));
        assert_eq!(run(&model, &pixels, &aux, pass(0)), run(&model, &pixels, &aux, pass(0)));
        assert_ne!(run(&model, &pixels, &aux, pass(0)), run(&model, &pixels, &aux, pass(1)));
    }

    #[test]
    fn projection_bounds_every_scan() {
        let mut model = PoseModel::new(ModelConfig::default(), 5).unwrap();
        let ids: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).ends_with(".a")).collect();
        assert_eq!(ids.len(), 3);
        for id in ids {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 4.0);
        }
        assert!(model.max_spectral_radius() > 1.0);
        model.project();
        assert!(model.max_spectral_radius() <= 1.0 + 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { frame_size: 40, ..ModelConfig::default() };
        assert!(PoseModel::new(bad, 0).is_err());
        let bad = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_cost_probe() {
        let model = PoseModel::new(ModelConfig::default(), 6).unwrap();
        let (pixels, aux) = toy_window(&model, 7, 3);
        let t = std::time::Instant::now();
        let win = WindowInput {
            pixels: pixels.iter().map(Vec::as_slice).collect(),
            aux: aux.iter().collect(),
            labels: vec![GroupLabel::Noise; 7],
        };
        let emb: Vec<Vec<f64>> = aux.iter().map(|a| a.embedding.clone()).collect();
        let (f, n) = derive_orderings(&emb);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &model.store, &win, (&f, &n), None).unwrap();
        let loss = g.sum_squares(out.poses).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads, &model.store);
        eprintln!("window fwd+bwd {:?}, {} params", t.elapsed(), pg.iter().map(Tensor::numel).sum::<usize>());
    }
}
