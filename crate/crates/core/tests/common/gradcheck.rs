//! Central finite differences against reverse-mode gradients, op by op and
//! through the full networks.

use std::rc::Rc;

use freehand::flow::sequence_flows;
use freehand::mamba::{derive_orderings, DualSsm, OrderingKind, Ssm, TokenOrdering};
use freehand::model::attention::CrossAttention;
use freehand::model::losses::{total_loss, LossWeights};
use freehand::model::pipeline::{anchored_truth, prepare, truth_trajectory};
use freehand::model::{DropoutPass, ModelConfig, PoseModel};
use freehand::nn::{Conv, Linear, MapDims};
use freehand::sampling::{ContrastiveConfig, ContrastiveEncoder, GroupLabel, SequenceView};
use freehand::synth::{generate, SweepSpec};
use freehand::tensor::{dropout_mask, Graph, ParamId, ParamStore, Result, RngKey, Tensor, Var, PAD};
use rand::Rng;

const STEP: f64 = 1e-6;
const ABS_TOL: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;

fn close(numeric: f64, analytic: f64) -> bool {
    (numeric - analytic).abs() <= ABS_TOL + REL_TOL * numeric.abs().max(analytic.abs())
}

fn random(shape: &[usize], key: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = RngKey::new(key).rng();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values away from zero so kinks stay out of the difference stencil.
fn off_zero(shape: &[usize], key: u64) -> Tensor {
    let mut t = random(shape, key, 0.1, 1.0);
    let mut rng = RngKey::new(key).child("sign", 0).rng();
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random::<bool>() {
            *v = -*v
        }
    });
    t
}

type Op = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Reduces the op's output with fixed random weights, so every output
/// element contributes to the checked scalar.
fn scalar(g: &mut Graph, inputs: &[Tensor], op: &Op) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let y = op(g, &vars).unwrap();
    let w = random(g.value(y).shape(), 99, -1.0, 1.0);
    let w = g.constant(w).unwrap();
    let p = g.mul(y, w).unwrap();
    (vars, g.sum(p).unwrap())
}

fn check_op(name: &str, inputs: Vec<Tensor>, op: &Op) {
    let mut g = Graph::new();
    let (vars, root) = scalar(&mut g, &inputs, op);
    let grads = g.backward(root).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..inputs[k].numel() {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[k].data_mut()[i] += delta;
                let mut g = Graph::new();
                let (_, r) = scalar(&mut g, &moved, op);
                g.value(r).item()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            assert!(
                close(numeric, analytic.data()[i]),
                "{name}: input {k} element {i}: numeric {numeric} analytic {}",
                analytic.data()[i]
            );
        }
    }
}

pub fn elementwise_ops() {
    let a = || off_zero(&[3, 4], 1);
    let b = || off_zero(&[3, 4], 2);
    check_op("add", vec![a(), b()], &|g, v| g.add(v[0], v[1]));
    check_op("sub", vec![a(), b()], &|g, v| g.sub(v[0], v[1]));
    check_op("mul", vec![a(), b()], &|g, v| g.mul(v[0], v[1]));
    check_op("div", vec![a(), b()], &|g, v| g.div(v[0], v[1]));
    check_op("scale", vec![a()], &|g, v| g.scale(v[0], -1.7));
    check_op("add_scalar", vec![a()], &|g, v| g.add_scalar(v[0], 0.3));
    check_op("neg", vec![a()], &|g, v| g.neg(v[0]));
    check_op("one_minus", vec![a()], &|g, v| g.one_minus(v[0]));
    check_op("sigmoid", vec![a()], &|g, v| g.sigmoid(v[0]));
    check_op("relu", vec![a()], &|g, v| g.relu(v[0]));
    check_op("sqrt", vec![random(&[3, 4], 3, 0.2, 2.0)], &|g, v| g.sqrt(v[0]));
    check_op("sin", vec![a()], &|g, v| g.sin(v[0]));
    check_op("cos", vec![a()], &|g, v| g.cos(v[0]));
    let mask = dropout_mask(&[3, 4], 0.5, RngKey::new(4)).unwrap();
    check_op("dropout", vec![a()], &move |g, v| g.dropout(v[0], &mask));
}

pub fn broadcast_and_matrix_ops() {
    check_op("add_row", vec![off_zero(&[3, 4], 1), off_zero(&[4], 2)], &|g, v| {
        g.add_row(v[0], v[1])
    });
    check_op("mul_col", vec![off_zero(&[3, 4], 1), off_zero(&[3, 1], 2)], &|g, v| {
        g.mul_col(v[0], v[1])
    });
    check_op("matmul", vec![off_zero(&[3, 4], 1), off_zero(&[4, 2], 2)], &|g, v| {
        g.matmul(v[0], v[1])
    });
    check_op(
        "affine",
        vec![off_zero(&[3, 4], 1), off_zero(&[4, 2], 2), off_zero(&[2], 3)],
        &|g, v| g.affine(v[0], v[1], v[2]),
    );
    check_op("softmax_rows", vec![off_zero(&[3, 5], 1)], &|g, v| g.softmax_rows(v[0]));
    check_op("row_norms", vec![off_zero(&[3, 4], 1)], &|g, v| g.row_norms(v[0]));
    check_op("l2_normalize_rows", vec![off_zero(&[3, 4], 1)], &|g, v| {
        g.l2_normalize_rows(v[0])
    });
}

pub fn reductions_and_layout_ops() {
    let a = || off_zero(&[4, 3], 5);
    check_op("sum", vec![a()], &|g, v| g.sum(v[0]));
    check_op("mean", vec![a()], &|g, v| g.mean(v[0]));
    check_op("sum_squares", vec![a()], &|g, v| g.sum_squares(v[0]));
    check_op("concat_rows", vec![a(), off_zero(&[2, 3], 6)], &|g, v| {
        g.concat_rows(&[v[0], v[1], v[0]])
    });
    check_op("concat_cols", vec![a(), off_zero(&[4, 2], 6)], &|g, v| {
        g.concat_cols(&[v[1], v[0]])
    });
    check_op("gather", vec![a()], &|g, v| {
        let idx: Rc<[usize]> = vec![0, 5, PAD, 5, 11, 2].into();
        g.gather(v[0], idx, vec![2, 3])
    });
    check_op("slice_rows", vec![a()], &|g, v| g.slice_rows(v[0], 1, 3));
    check_op("slice_cols", vec![a()], &|g, v| g.slice_cols(v[0], 1, 3));
    check_op("permute_rows", vec![a()], &|g, v| g.permute_rows(v[0], &[2, 0, 3, 1]));
    check_op("transpose", vec![a()], &|g, v| g.transpose(v[0]));
    check_op("reshape", vec![a()], &|g, v| g.reshape(v[0], vec![2, 6]));
}

/// Checks gradients of `loss(store)` with respect to a sample of entries of every parameter.
fn check_params(name: &str, store: &ParamStore, per_param: usize, loss: &dyn Fn(&mut Graph, &ParamStore) -> Var) {
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    let grads = g.backward(root).unwrap();
    let analytic = g.param_grads(&grads, store);
    let mut rng = RngKey::new(17).rng();
    let mut live = 0;
    for id in store.ids() {
        let n = store.get(id).numel();
        for _ in 0..per_param.min(n) {
            let i = rng.random_range(0..n);
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut g = Graph::new();
                let r = loss(&mut g, &s);
                g.value(r).item()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic[id_index(store, id)].data()[i];
            if a.abs() > 1e-8 {
                live += 1;
            }
            assert!(
                close(numeric, a),
                "{name}: {} element {i}: numeric {numeric} analytic {a}",
                store.name(id)
            );
        }
    }
    assert!(live * 2 >= store.len(), "{name}: only {live} nonzero gradients checked");
}

fn id_index(store: &ParamStore, id: ParamId) -> usize {
    store.ids().position(|x| x == id).expect("id in store")
}

pub fn layers() {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, 1.0, RngKey::new(1));
    let conv = Conv::new(&mut store, "conv", 2, 3, RngKey::new(2));
    let x = off_zero(&[4, 4], 3);
    let maps = off_zero(&[2 * 4 * 4, 2], 4);
    check_params("linear+conv", &store, 6, &|g, s| {
        let xv = g.constant(x.clone()).unwrap();
        let y = lin.forward(g, s, xv).unwrap();
        let a = g.sum_squares(y).unwrap();
        let mv = g.constant(maps.clone()).unwrap();
        let dims = MapDims {
            batch: 2,
            height: 4,
            width: 4,
        };
        let (c, _) = conv.forward(g, s, mv, dims).unwrap();
        let b = g.sum_squares(c).unwrap();
        g.add(a, b).unwrap()
    });
}

pub fn state_space_scans_and_attention() {
    let mut store = ParamStore::new();
    let ssm = Ssm::new(&mut store, "ssm", 3, 4, 3, RngKey::new(1));
    let dual = DualSsm::new(&mut store, "dual", 3, 4, RngKey::new(2));
    let att = CrossAttention::new(&mut store, "att", 3, RngKey::new(3));
    let x = off_zero(&[6, 3], 4);
    let fwd = TokenOrdering::identity(OrderingKind::Fps, 6);
    let mut nb = TokenOrdering::identity(OrderingKind::Nps, 6);
    nb.order = vec![3, 1, 5, 0, 2, 4];
    check_params("ssm+dual+attention", &store, 5, &|g, s| {
        let xv = g.constant(x.clone()).unwrap();
        let inner = ssm.forward(g, s, xv, Some(4)).unwrap();
        let full = ssm.forward(g, s, xv, None).unwrap();
        let d = dual.forward(g, s, inner, &fwd, &nb).unwrap();
        let a = att.forward(g, s, d.fps, d.nps).unwrap();
        let parts = [
            g.sum_squares(full).unwrap(),
            g.sum_squares(d.fused).unwrap(),
            g.sum_squares(a.output).unwrap(),
        ];
        let t = g.add(parts[0], parts[1]).unwrap();
        g.add(t, parts[2]).unwrap()
    });
}

fn sweep() -> freehand::synth::SweepSequence {
    let mut spec = SweepSpec::linear(5, 0.5, 8);
    spec.width = 32;
    spec.height = 32;
    spec.noise_std = 0.02;
    generate(&spec).unwrap()
}

pub fn full_pose_network_with_losses() {
    let seq = sweep();
    let model = PoseModel::new(
        ModelConfig {
            frame_size: 32,
            ..ModelConfig::default()
        },
        3,
    )
    .unwrap();
    let encoder = ContrastiveEncoder::new(ContrastiveConfig::default());
    let prep = prepare(&seq.frames, &model, &encoder).unwrap();
    let labels = vec![
        GroupLabel::Forward,
        GroupLabel::Forward,
        GroupLabel::Backward,
        GroupLabel::Noise,
        GroupLabel::Transition,
    ];
    let (fo, no) = derive_orderings(&prep.embeddings()[..4]);
    let gt = anchored_truth(&truth_trajectory(&seq.gt_relatives), 0, 4);
    let extent = seq.frames[0].extent();
    let weights = LossWeights::default();
    check_params("pose network", &model.store, 2, &|g, s| {
        let win = prep.window(0, 4, &labels);
        let pass = DropoutPass {
            rate: 0.1,
            key: RngKey::new(5),
        };
        let out = model.forward(g, s, &win, (&fo, &no), Some(pass)).unwrap();
        let terms = total_loss(g, out.poses, &gt, (out.fps_stream, out.nps_stream), &weights, extent).unwrap();
        terms.total
    });
}

pub fn full_contrastive_encoder() {
    let seq = sweep();
    let flows = sequence_flows(&seq.frames).unwrap();
    let enc = ContrastiveEncoder::new(ContrastiveConfig {
        margin: 5.0,
        ..ContrastiveConfig::default()
    });
    let view = SequenceView {
        frames: &seq.frames,
        flows: &flows,
    };
    let triplets = [(0, 1, 4), (2, 3, 0), (4, 3, 1)];
    check_params("encoder", &enc.store, 3, &|g, s| {
        let mut e = enc.clone();
        e.store = s.clone();
        e.loss_on(g, view, &triplets).unwrap()
    });
}
