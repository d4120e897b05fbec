//! Per-sequence preprocessing, window planning and full-sweep reconstruction.

use crate::flow::{flow_features, sequence_flows, FlowField};
use crate::mamba::derive_orderings;
use crate::pose::{accumulate, Pose6DoF, Trajectory};
use crate::sampling::{
    axial_velocities, default_tau, fps_high_gradient, frame_labels, group_frames, nps, ContrastiveEncoder,
    FrameGroup, GroupLabel, GroupingConfig, SequenceView,
};
use crate::synth::Frame;
use crate::tensor::{Graph, Result, Tensor, TensorError};

use super::{DropoutPass, FrameAux, PoseModel, WindowInput};

/// Longest window used for reconstruction.
pub const RECONSTRUCTION_WINDOW: usize = 7;

/// A sweep with every model input precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub frames: Vec<Frame>,
    /// Intensities minus 0.5, one vector per frame.
    pub pixels: Vec<Vec<f64>>,
    /// Entry `m` is the flow from frame `m` to `m + 1`.
    pub flows: Vec<FlowField>,
    pub aux: Vec<FrameAux>,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        self.aux.iter().map(|a| a.embedding.clone()).collect()
    }

    pub fn window(&self, start: usize, len: usize, labels: &[GroupLabel]) -> WindowInput<'_> {
        WindowInput {
            pixels: self.pixels[start..start + len].iter().map(Vec::as_slice).collect(),
            aux: self.aux[start..start + len].iter().collect(),
            labels: labels[start..start + len].to_vec(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

/// Sampler pooling weights for one frame on a `grid x grid` layout.
fn sampler_weights(frame: &Frame, grid: usize, fps_points: usize, neighbours: usize) -> (Vec<f64>, Vec<f64>) {
    let tau = default_tau(frame);
    let cells = grid * grid;
    if !(tau > 0.0) {
        return (vec![1.0 / cells as f64; cells], vec![1.0 / cells as f64; cells]);
    }
    let f = fps_high_gradient(frame, tau, fps_points).cell_histogram(frame.width, frame.height, grid);
    let n = match nps(frame, tau, neighbours) {
        Ok(set) => set.cell_histogram(frame.width, frame.height, grid),
        Err(_) => vec![1.0 / cells as f64; cells],
    };
    (f, n)
}

/// Centred pixels, auxiliary inputs and the incoming flow of `frame`, given
/// the frame before it (if any).
pub fn prepare_frame(
    model: &PoseModel,
    encoder: &ContrastiveEncoder,
    prev: Option<&Frame>,
    frame: &Frame,
) -> Result<(Vec<f64>, FrameAux, Option<FlowField>)> {
    let size = model.config.frame_size;
    if frame.width != size || frame.height != size {
        return Err(invalid(format!("frames must be {size}x{size}")));
    }
    let grid = model.config.grid();
    let (flow, field, embedding) = match prev {
        None => {
            let frames = std::slice::from_ref(frame);
            let e = encoder.embed(SequenceView { frames, flows: &[] })?;
            (vec![0.0; grid * grid * 3], None, e[0].clone())
        }
        Some(p) => {
            let field = crate::flow::estimate_flow(p, frame).map_err(invalid)?;
            let frames = [p.clone(), frame.clone()];
            let e = encoder.embed(SequenceView {
                frames: &frames,
                flows: std::slice::from_ref(&field),
            })?;
            let feat = flow_features(&field, grid).map_err(invalid)?.into_data();
            (feat, Some(field), e[1].clone())
        }
    };
    let (fps_weights, nps_weights) = sampler_weights(frame, grid, model.config.fps_points, model.config.nps_neighbours);
    let pixels = frame.intensities.iter().map(|&v| v as f64 - 0.5).collect();
    Ok((
        pixels,
        FrameAux {
            flow,
            fps_weights,
            nps_weights,
            embedding,
        },
        field,
    ))
}

pub fn prepare(frames: &[Frame], model: &PoseModel, encoder: &ContrastiveEncoder) -> Result<PreparedSequence> {
    let size = model.config.frame_size;
    if frames.len() < 2 {
        return Err(invalid("a sweep needs at least two frames"));
    }
    if frames.iter().any(|f| f.width != size || f.height != size) {
        return Err(invalid(format!("frames must be {size}x{size}")));
    }
    let flows = sequence_flows(frames).map_err(invalid)?;
    let embeddings = encoder.embed(SequenceView { frames, flows: &flows })?;
    let grid = model.config.grid();
    let mut aux = Vec::with_capacity(frames.len());
    for (m, frame) in frames.iter().enumerate() {
        let flow = if m == 0 {
            vec![0.0; grid * grid * 3]
        } else {
            flow_features(&flows[m - 1], grid).map_err(invalid)?.into_data()
        };
        let (fps_weights, nps_weights) =
            sampler_weights(frame, grid, model.config.fps_points, model.config.nps_neighbours);
        aux.push(FrameAux {
            flow,
            fps_weights,
            nps_weights,
            embedding: embeddings[m].clone(),
        });
    }
    let pixels = frames
        .iter()
        .map(|f| f.intensities.iter().map(|&v| v as f64 - 0.5).collect())
        .collect();
    Ok(PreparedSequence {
        frames: frames.to_vec(),
        pixels,
        flows,
        aux,
    })
}

/// Groups and per-frame labels from embeddings and a relative-motion estimate.
pub fn label_frames(
    prep: &PreparedSequence,
    relatives: &[Pose6DoF],
    cfg: &GroupingConfig,
) -> (Vec<FrameGroup>, Vec<GroupLabel>) {
    let groups = group_frames(&prep.embeddings(), &axial_velocities(relatives), cfg);
    let labels = frame_labels(&groups, prep.len());
    (groups, labels)
}

/// Window starts covering `frames` with windows of `len` sharing one frame;
/// the last window is shifted back to end on the last frame.
pub fn window_starts(frames: usize, len: usize) -> Vec<usize> {
    if frames <= len {
        return vec![0];
    }
    let mut out = vec![0];
    let mut s = 0;
    while s + len < frames {
        s = (s + len - 1).min(frames - len);
        out.push(s);
    }
    out
}

fn row_to_pose(row: &[f64]) -> Pose6DoF {
    Pose6DoF::new([row[0], row[1], row[2]], [row[3], row[4], row[5]])
}

pub fn rows_to_poses(t: &Tensor) -> Vec<Pose6DoF> {
    (0..t.rows()).map(|r| row_to_pose(t.row(r))).collect()
}

/// Anchored poses for one window, optionally with a dropout pass.
pub fn predict_window(
    model: &PoseModel,
    prep: &PreparedSequence,
    start: usize,
    len: usize,
    labels: &[GroupLabel],
    dropout: Option<DropoutPass>,
) -> Result<Vec<Pose6DoF>> {
    let win = prep.window(start, len, labels);
    let (fo, no) = derive_orderings(&prep.embeddings()[start..start + len]);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &model.store, &win, (&fo, &no), dropout)?;
    Ok(rows_to_poses(g.value(out.poses)))
}

/// Deterministic anchored poses for an assembled window.
pub fn predict_window_input(
    model: &PoseModel,
    win: &WindowInput,
    orderings: (&crate::mamba::TokenOrdering, &crate::mamba::TokenOrdering),
) -> Result<Vec<Pose6DoF>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &model.store, win, orderings, None)?;
    Ok(rows_to_poses(g.value(out.poses)))
}

/// A trained pose network together with its frame encoder.
#[derive(Clone, Debug)]
pub struct Estimator {
    pub model: PoseModel,
    pub encoder: ContrastiveEncoder,
    pub grouping: GroupingConfig,
}

impl Estimator {
    pub fn prepare(&self, frames: &[Frame]) -> Result<PreparedSequence> {
        prepare(frames, &self.model, &self.encoder)
    }

    pub fn reconstruct(&self, frames: &[Frame]) -> Result<Reconstruction> {
        reconstruct(&self.model, &self.prepare(frames)?, &self.grouping)
    }
}

/// Chains window predictions into a sweep trajectory.
pub fn reconstruct_with_labels(model: &PoseModel, prep: &PreparedSequence, labels: &[GroupLabel]) -> Result<Trajectory> {
    let m = prep.len();
    let len = RECONSTRUCTION_WINDOW.min(m);
    let mut abs: Vec<Option<Pose6DoF>> = vec![None; m];
    abs[0] = Some(Pose6DoF::IDENTITY);
    for s in window_starts(m, len) {
        let anchored = predict_window(model, prep, s, len, labels, None)?;
        let base = abs[s].expect("window start already placed");
        for (j, p) in anchored.iter().enumerate().skip(1) {
            if abs[s + j].is_none() {
                abs[s + j] = Some(base.compose(p));
            }
        }
    }
    Trajectory::new(abs.into_iter().map(|p| p.expect("every frame covered")).collect()).map_err(invalid)
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub trajectory: Trajectory,
    pub groups: Vec<FrameGroup>,
    pub labels: Vec<GroupLabel>,
}

/// Two passes: the first with every frame labelled noise, the second with
/// labels derived from the first pass's axial motion.
pub fn reconstruct(model: &PoseModel, prep: &PreparedSequence, grouping: &GroupingConfig) -> Result<Reconstruction> {
    let noise = vec![GroupLabel::Noise; prep.len()];
    let first = reconstruct_with_labels(model, prep, &noise)?;
    let (groups, labels) = label_frames(prep, &first.relatives(), grouping);
    let trajectory = reconstruct_with_labels(model, prep, &labels)?;
    Ok(Reconstruction {
        trajectory,
        groups,
        labels,
    })
}

/// Ground-truth poses of `len` frames from `start`, anchored at `start`.
pub fn anchored_truth(truth: &Trajectory, start: usize, len: usize) -> Vec<Pose6DoF> {
    let inv = truth.poses()[start].inverse();
    truth.poses()[start..start + len].iter().map(|p| inv.compose(p)).collect()
}

/// Ground-truth trajectory of a sweep from its relative motions.
pub fn truth_trajectory(relatives: &[Pose6DoF]) -> Trajectory {
    accumulate(relatives)
}
