//! Triplet-trained frame encoder.
//!
//! A frame is described by its intensities, its difference to the previous
//! frame and the pooled flow from the previous frame. Three strided
//! convolutions and a global average feed a two-layer projection whose output
//! is normalised to the unit sphere.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{flow_features, FlowField};
use crate::nn::{global_average, Conv, Linear, MapDims};
use crate::synth::Frame;
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Result, RngKey, Tensor, TensorError, Var};

/// Grid used to pool flow into encoder features.
pub const FLOW_GRID: usize = 4;
const FLOW_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Positives lie within this many frames of the anchor.
    pub positive_window: usize,
    /// Negatives lie at least this many frames from the anchor.
    pub negative_gap: usize,
    pub margin: f64,
    pub embed_dim: usize,
    pub iterations: usize,
    pub anchors_per_batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            positive_window: 2,
            negative_gap: 10,
            margin: 0.2,
            embed_dim: 32,
            iterations: 120,
            anchors_per_batch: 12,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// `max(|a - p|^2 - |a - n|^2 + margin, 0)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    (d(a, p) - d(a, n) + margin).max(0.0)
}

/// Mean triplet loss over rows of `[b, d]` anchor/positive/negative batches.
pub fn triplet_loss_graph(g: &mut Graph, a: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    let d = g.value(a).cols();
    let ones = g.constant(Tensor::full([d, 1], 1.0))?;
    let sq_dist = |g: &mut Graph, x: Var, y: Var| -> Result<Var> {
        let diff = g.sub(x, y)?;
        let sq = g.mul(diff, diff)?;
        g.matmul(sq, ones)
    };
    let dap = sq_dist(g, a, p)?;
    let dan = sq_dist(g, a, n)?;
    let gap = g.sub(dap, dan)?;
    let shifted = g.add_scalar(gap, margin)?;
    let hinge = g.relu(shifted)?;
    g.mean(hinge)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct ContrastiveEncoder {
    pub store: ParamStore,
    convs: [Conv; 3],
    hidden: Linear,
    proj: Linear,
    pub config: ContrastiveConfig,
}

/// A sequence seen by the encoder: frames and the flows between them.
#[derive(Clone, Copy)]
pub struct SequenceView<'a> {
    pub frames: &'a [Frame],
    pub flows: &'a [FlowField],
}

/// 2x2 average-pooled intensity and temporal difference, `[pixels, 2]`.
fn frame_input(frames: &[Frame], t: usize) -> Vec<f64> {
    let f = &frames[t];
    let prev = if t == 0 { f } else { &frames[t - 1] };
    let (w, h) = (f.width / 2, f.height / 2);
    let mut out = Vec::with_capacity(w * h * 2);
    for r in 0..h {
        for c in 0..w {
            let pool = |fr: &Frame| {
                (fr.at(2 * c, 2 * r) + fr.at(2 * c + 1, 2 * r) + fr.at(2 * c, 2 * r + 1) + fr.at(2 * c + 1, 2 * r + 1))
                    as f64
                    / 4.0
            };
            let cur = pool(f);
            out.push(cur - 0.5);
            out.push(cur - pool(prev));
        }
    }
    out
}

fn flow_input(flows: &[FlowField], t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Ok(vec![0.0; FLOW_GRID * FLOW_GRID * 3]);
    }
    let feat = flow_features(&flows[t - 1], FLOW_GRID).map_err(|e| TensorError::Invalid(e.to_string()))?;
    Ok(feat
        .data()
        .chunks(3)
        .flat_map(|c| [c[0] * FLOW_SCALE, c[1] * FLOW_SCALE, c[2]])
        .collect())
}

impl ContrastiveEncoder {
    pub fn new(config: ContrastiveConfig) -> Self {
        let mut store = ParamStore::new();
        let key = RngKey::new(config.seed).child("contrastive", 0);
        let convs = [
            Conv::new(&mut store, "enc.conv0", 2, 8, key.child("conv", 0)),
            Conv::new(&mut store, "enc.conv1", 8, 16, key.child("conv", 1)),
            Conv::new(&mut store, "enc.conv2", 16, 16, key.child("conv", 2)),
        ];
        let flow_dim = FLOW_GRID * FLOW_GRID * 3;
        let hidden = Linear::new(&mut store, "enc.hidden", 16 + flow_dim, 32, 6f64.sqrt(), key.child("hidden", 0));
        let proj = Linear::new(&mut store, "enc.proj", 32, config.embed_dim, 1.0, key.child("proj", 0));
        Self {
            store,
            convs,
            hidden,
            proj,
            config,
        }
    }

    /// Embeddings `[frames.len(), d]` for the listed frame indices of one sequence.
    pub fn embed_graph(&self, g: &mut Graph, seq: SequenceView, idx: &[usize]) -> Result<Var> {
        let f0 = &seq.frames[0];
        let dims = MapDims {
            batch: idx.len(),
            height: f0.height / 2,
            width: f0.width / 2,
        };
        let mut pix = Vec::with_capacity(dims.batch * dims.height * dims.width * 2);
        let mut flow = Vec::new();
        for &t in idx {
            pix.extend(frame_input(seq.frames, t));
            flow.extend(flow_input(seq.flows, t)?);
        }
        let mut x = g.constant(Tensor::new([dims.batch * dims.height * dims.width, 2], pix)?)?;
        let mut d = dims;
        for conv in &self.convs {
            (x, d) = conv.forward(g, &self.store, x, d)?;
        }
        let pooled = global_average(g, x, idx.len())?;
        let fl = g.constant(Tensor::new([idx.len(), FLOW_GRID * FLOW_GRID * 3], flow)?)?;
        let joined = g.concat_cols(&[pooled, fl])?;
        let h = self.hidden.forward(g, &self.store, joined)?;
        let h = g.relu(h)?;
        let e = self.proj.forward(g, &self.store, h)?;
        g.l2_normalize_rows(e)
    }

    /// Unit-norm embedding of every frame of a sequence.
    pub fn embed(&self, seq: SequenceView) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seq.frames.len());
        let all: Vec<usize> = (0..seq.frames.len()).collect();
        for chunk in all.chunks(32) {
            let mut g = Graph::new();
            let e = self.embed_graph(&mut g, seq, chunk)?;
            let v = g.value(e);
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn loss_on(&self, g: &mut Graph, seq: SequenceView, triplets: &[(usize, usize, usize)]) -> Result<Var> {
        let mut frames: Vec<usize> = triplets.iter().flat_map(|&(a, p, n)| [a, p, n]).collect();
        frames.sort_unstable();
        frames.dedup();
        let pos = |t: usize| frames.binary_search(&t).expect("frame listed");
        let e = self.embed_graph(g, seq, &frames)?;
        let rows = |g: &mut Graph, which: &dyn Fn(&(usize, usize, usize)) -> usize| {
            let order: Vec<usize> = triplets.iter().map(|t| pos(which(t))).collect();
            let d = g.value(e).cols();
            let index: Rc<[usize]> = order.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
            g.gather(e, index, vec![order.len(), d])
        };
        let a = rows(g, &|t| t.0)?;
        let p = rows(g, &|t| t.1)?;
        let n = rows(g, &|t| t.2)?;
        triplet_loss_graph(g, a, p, n, self.config.margin)
    }
}

fn sample_triplets(len: usize, cfg: &ContrastiveConfig, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(cfg.anchors_per_batch);
    while out.len() < cfg.anchors_per_batch {
        let a = rng.random_range(0..len);
        let lo = a.saturating_sub(cfg.positive_window);
        let hi = (a + cfg.positive_window).min(len - 1);
        let p = rng.random_range(lo..=hi);
        if p == a {
            continue;
        }
        let negs: Vec<usize> = (0..len).filter(|&n| n.abs_diff(a) >= cfg.negative_gap).collect();
        if negs.is_empty() {
            continue;
        }
        out.push((a, p, negs[rng.random_range(0..negs.len())]));
    }
    out
}

/// Trains an encoder on one or more sequences with randomly drawn triplets.
pub fn train_embedding(seqs: &[SequenceView], config: ContrastiveConfig) -> Result<(ContrastiveEncoder, EncoderReport)> {
    if !(config.margin > 0.0) || config.positive_window == 0 {
        return Err(TensorError::Invalid("margin and positive window must be positive".into()));
    }
    let usable: Vec<&SequenceView> = seqs.iter().filter(|s| s.frames.len() > config.negative_gap).collect();
    if usable.is_empty() {
        return Err(TensorError::Invalid(format!(
            "no valid triplets: every sequence is at most {} frames",
            config.negative_gap
        )));
    }
    let mut enc = ContrastiveEncoder::new(config.clone());
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &enc.store,
    )?;
    let mut rng = RngKey::new(config.seed).child("triplets", 0).rng();
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let seq = usable[it % usable.len()];
        let trip = sample_triplets(seq.frames.len(), &config, &mut rng);
        let mut g = Graph::new();
        let loss = enc.loss_on(&mut g, *seq, &trip)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let pg = g.param_grads(&grads, &enc.store);
        opt.step(&mut enc.store, &pg)?;
    }
    let window = (config.iterations / 5).max(1);
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let report = EncoderReport {
        initial_loss: avg(&losses[..window.min(losses.len())]),
        final_loss: avg(&losses[losses.len().saturating_sub(window)..]),
        iterations: config.iterations,
    };
    Ok((enc, report))
}
