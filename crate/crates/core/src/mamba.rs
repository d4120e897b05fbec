//! Linear state-space blocks: a causal windowed scan over frame features and
//! a pair of scans over two token orderings fused by a learned gate.
//!
//! The recurrence is `h_t = A h_{t-1} + B f_t`, `y_t = C h_t + D f_t`, evaluated
//! on row vectors, so the graph computes `h_t = h_{t-1} A^T + f_t B^T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::nn::{uniform_init, Linear};
use crate::sampling::farthest_point_order;
use crate::tensor::{Graph, ParamId, ParamStore, Result, RngKey, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct Ssm {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d: ParamId,
    pub d_in: usize,
    pub d_state: usize,
    pub d_out: usize,
}

impl Ssm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_state: usize, d_out: usize, key: RngKey) -> Self {
        let mut a = uniform_init(&[d_state, d_state], 0.1 / (d_state as f64).sqrt(), key.child("a", 0));
        for i in 0..d_state {
            a.data_mut()[i * d_state + i] += 0.5;
        }
        let a = store.add(format!("{name}.a"), a);
        let b = store.add(
            format!("{name}.b"),
            uniform_init(&[d_state, d_in], 1.0 / (d_in as f64).sqrt(), key.child("b", 0)),
        );
        let c = store.add(
            format!("{name}.c"),
            uniform_init(&[d_out, d_state], 1.0 / (d_state as f64).sqrt(), key.child("c", 0)),
        );
        let d = store.add(
            format!("{name}.d"),
            uniform_init(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), key.child("d", 0)),
        );
        Self {
            a,
            b,
            c,
            d,
            d_in,
            d_state,
            d_out,
        }
    }

    /// Runs the scan over `x: [T, d_in]`; the state is zeroed at every multiple
    /// of `window` (no resets when `window` is `None`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, window: Option<usize>) -> Result<Var> {
        let t_len = g.value(x).rows();
        if g.value(x).cols() != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "ssm",
                lhs: g.shape(x).to_vec(),
                rhs: vec![t_len, self.d_in],
            });
        }
        if window == Some(0) {
            return Err(TensorError::Invalid("window must be positive".into()));
        }
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let c = g.param(store, self.c);
        let d = g.param(store, self.d);
        let at = g.transpose(a)?;
        let bt = g.transpose(b)?;
        let ct = g.transpose(c)?;
        let dt = g.transpose(d)?;
        let drive = g.matmul(x, bt)?;
        let mut states = Vec::with_capacity(t_len);
        let mut h: Option<Var> = None;
        for t in 0..t_len {
            let u = g.slice_rows(drive, t, t + 1)?;
            let reset = window.is_some_and(|k| t % k == 0);
            let next = match h {
                Some(prev) if !reset => {
                    let carried = g.matmul(prev, at)?;
                    g.add(carried, u)?
                }
                _ => u,
            };
            states.push(next);
            h = Some(next);
        }
        let hs = g.concat_rows(&states)?;
        let y = g.matmul(hs, ct)?;
        let skip = g.matmul(x, dt)?;
        g.add(y, skip)
    }

    pub fn spectral_radius(&self, store: &ParamStore) -> f64 {
        spectral_radius(store.get(self.a))
    }

    /// Rescales `A` so its spectral radius does not exceed one.
    pub fn project(&self, store: &mut ParamStore) {
        let rho = self.spectral_radius(store);
        if rho > 1.0 {
            let s = 1.0 / rho;
            store.get_mut(self.a).data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.a, self.b, self.c, self.d]
    }
}

pub fn spectral_radius(a: &Tensor) -> f64 {
    let n = a.shape()[0];
    let m = DMatrix::from_row_slice(n, n, a.data());
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingKind {
    Fps,
    Nps,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOrdering {
    pub kind: OrderingKind,
    /// Position `i` of the reordered sequence holds token `order[i]`.
    pub order: Vec<usize>,
}

impl TokenOrdering {
    pub fn identity(kind: OrderingKind, len: usize) -> Self {
        Self {
            kind,
            order: (0..len).collect(),
        }
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (i, &t) in self.order.iter().enumerate() {
            inv[t] = i;
        }
        inv
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        self.order.iter().all(|&t| t < seen.len() && !std::mem::replace(&mut seen[t], true))
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Farthest-point order and greedy nearest-neighbour chain over token
/// embeddings, both starting at token 0.
pub fn derive_orderings(embeddings: &[Vec<f64>]) -> (TokenOrdering, TokenOrdering) {
    let m = embeddings.len();
    if m == 0 {
        return (TokenOrdering::identity(OrderingKind::Fps, 0), TokenOrdering::identity(OrderingKind::Nps, 0));
    }
    let fps = farthest_point_order(m, m, 0, |i, j| euclid(&embeddings[i], &embeddings[j])).expect("full order");
    let mut chain = vec![0];
    let mut used = vec![false; m];
    used[0] = true;
    while chain.len() < m {
        let cur = *chain.last().unwrap();
        let next = (0..m)
            .filter(|&j| !used[j])
            .fold(None, |best: Option<(usize, f64)>, j| {
                let d = euclid(&embeddings[cur], &embeddings[j]);
                match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((j, d)),
                }
            })
            .expect("unvisited token")
            .0;
        used[next] = true;
        chain.push(next);
    }
    (
        TokenOrdering {
            kind: OrderingKind::Fps,
            order: fps,
        },
        TokenOrdering {
            kind: OrderingKind::Nps,
            order: chain,
        },
    )
}

/// Two scans over alternative orderings and the gate that fuses them.
#[derive(Clone, Debug)]
pub struct DualSsm {
    pub fps: Ssm,
    pub nps: Ssm,
    pub gate: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    pub fps: Var,
    pub nps: Var,
    pub gate: Var,
    pub fused: Var,
}

impl DualSsm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_state: usize, key: RngKey) -> Self {
        Self {
            fps: Ssm::new(store, &format!("{name}.fps"), d, d_state, d, key.child("fps", 0)),
            nps: Ssm::new(store, &format!("{name}.nps"), d, d_state, d, key.child("nps", 0)),
            gate: Linear::new(store, &format!("{name}.gate"), 2 * d, d, 1.0, key.child("gate", 0)),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        fps: &TokenOrdering,
        nps: &TokenOrdering,
    ) -> Result<DualOutput> {
        let n = g.value(y).rows();
        for o in [fps, nps] {
            if o.order.len() != n || !o.is_bijection() {
                return Err(TensorError::Invalid(format!("ordering is not a permutation of {n} tokens")));
            }
        }
        let run = |g: &mut Graph, ssm: &Ssm, ord: &TokenOrdering| -> Result<Var> {
            let z = g.permute_rows(y, &ord.order)?;
            let out = ssm.forward(g, store, z, None)?;
            g.permute_rows(out, &ord.inverse())
        };
        let o_f = run(g, &self.fps, fps)?;
        let o_n = run(g, &self.nps, nps)?;
        let both = g.concat_cols(&[o_f, o_n])?;
        let logits = self.gate.forward(g, store, both)?;
        let gate = g.sigmoid(logits)?;
        let a = g.mul(gate, o_f)?;
        let rest = g.one_minus(gate)?;
        let b = g.mul(rest, o_n)?;
        let fused = g.add(a, b)?;
        Ok(DualOutput {
            fps: o_f,
            nps: o_n,
            gate,
            fused,
        })
    }

    pub fn project(&self, store: &mut ParamStore) {
        self.fps.project(store);
        self.nps.project(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_ssm(store: &mut ParamStore, a: f64, b: f64, c: f64, d: f64) -> Ssm {
        let s = Ssm::new(store, "s", 1, 1, 1, RngKey::new(0));
        store.get_mut(s.a).data_mut()[0] = a;
        store.get_mut(s.b).data_mut()[0] = b;
        store.get_mut(s.c).data_mut()[0] = c;
        store.get_mut(s.d).data_mut()[0] = d;
        s
    }

    #[test]
    fn hand_unrolled_recurrence() {
        let mut store = ParamStore::new();
        let s = scalar_ssm(&mut store, 0.5, 1.0, 1.0, 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 1], vec![1.0; 3]).unwrap()).unwrap();
        let y = s.forward(&mut g, &store, x, Some(3)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.5, 1.75]);
        let y2 = s.forward(&mut g, &store, x, Some(2)).unwrap();
        assert_eq!(g.value(y2).data(), &[1.0, 1.5, 1.0]);
    }

    #[test]
    fn zero_transition_is_pointwise() {
        let mut store = ParamStore::new();
        let s = Ssm::new(&mut store, "s", 3, 4, 2, RngKey::new(5));
        store.get_mut(s.a).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::new([5, 3], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = s.forward(&mut g, &store, xv, None).unwrap();
        let (b, c, d) = (store.get(s.b), store.get(s.c), store.get(s.d));
        for t in 0..5 {
            for o in 0..2 {
                let mut want = 0.0;
                for i in 0..3 {
                    let cb: f64 = (0..4).map(|k| c.data()[o * 4 + k] * b.data()[k * 3 + i]).sum();
                    want += (cb + d.data()[o * 3 + i]) * x.data()[t * 3 + i];
                }
                assert!((g.value(y).data()[t * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn scan_is_causal(vals in prop::collection::vec(-1.0..1.0f64, 8 * 3), bump in 0.1..2.0f64, t in 0usize..8) {
            let mut store = ParamStore::new();
            let s = Ssm::new(&mut store, "s", 3, 4, 2, RngKey::new(9));
            let x = Tensor::new([8, 3], vals).unwrap();
            let mut x2 = x.clone();
            x2.data_mut()[t * 3 + 1] += bump;
            let mut g = Graph::new();
            let (a, b) = (g.constant(x).unwrap(), g.constant(x2).unwrap());
            let ya = s.forward(&mut g, &store, a, Some(4)).unwrap();
            let yb = s.forward(&mut g, &store, b, Some(4)).unwrap();
            for r in 0..t {
                prop_assert_eq!(g.value(ya).row(r), g.value(yb).row(r));
            }
            prop_assert!(g.value(ya).row(t) != g.value(yb).row(t));
        }
    }

    #[test]
    fn projection_bounds_spectral_radius() {
        let mut store = ParamStore::new();
        let s = Ssm::new(&mut store, "s", 2, 3, 2, RngKey::new(1));
        store.get_mut(s.a).data_mut().copy_from_slice(&[0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        assert!((s.spectral_radius(&store) - 2.0).abs() < 1e-9);
        s.project(&mut store);
        assert!(s.spectral_radius(&store) <= 1.0 + 1e-6);
    }

    #[test]
    fn orderings_examples() {
        let (f, n) = derive_orderings(&[vec![0.3, 0.1]]);
        assert_eq!((f.order, n.order), (vec![0], vec![0]));
        let line: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 0.0]).collect();
        let (f, n) = derive_orderings(&line);
        assert_eq!(n.order, (0..8).collect::<Vec<_>>());
        assert_eq!(f.order[1], 7);
        assert!(f.is_bijection() && n.is_bijection());
    }

    fn dual_setup() -> (ParamStore, DualSsm, Tensor) {
        let mut store = ParamStore::new();
        let dual = DualSsm::new(&mut store, "dual", 4, 3, RngKey::new(2));
        let x = Tensor::new([6, 4], (0..24).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        (store, dual, x)
    }

    #[test]
    fn zero_gate_weights_average_streams() {
        let (mut store, dual, x) = dual_setup();
        store.get_mut(dual.gate.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let (f, n) = derive_orderings(&(0..6).map(|i| vec![(i * i) as f64]).collect::<Vec<_>>());
        let out = dual.forward(&mut g, &store, xv, &f, &n).unwrap();
        assert!(g.value(out.gate).data().iter().all(|&v| v == 0.5));
        let (of, on, fused) = (g.value(out.fps), g.value(out.nps), g.value(out.fused));
        for i in 0..fused.numel() {
            assert!((fused.data()[i] - 0.5 * (of.data()[i] + on.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_selects_fps_stream() {
        let (mut store, dual, x) = dual_setup();
        store.get_mut(dual.gate.bias).data_mut().iter_mut().for_each(|v| *v = 30.0);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let id = TokenOrdering::identity(OrderingKind::Fps, 6);
        let out = dual.forward(&mut g, &store, xv, &id, &id).unwrap();
        let (of, fused) = (g.value(out.fps), g.value(out.fused));
        for i in 0..fused.numel() {
            assert!((fused.data()[i] - of.data()[i]).abs() < 1e-6);
        }
        assert!(g.value(out.gate).data().iter().all(|&v| v > 0.0 && v < 1.0 + 1e-15));
    }

    #[test]
    fn identical_streams_agree() {
        let (mut store, dual, x) = dual_setup();
        for (src, dst) in dual.fps.ids().into_iter().zip(dual.nps.ids()) {
            let v = store.get(src).clone();
            *store.get_mut(dst) = v;
        }
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let id = TokenOrdering::identity(OrderingKind::Fps, 6);
        let out = dual.forward(&mut g, &store, xv, &id, &id).unwrap();
        assert_eq!(g.value(out.fps), g.value(out.nps));
        let diff: f64 = g
            .value(out.fused)
            .data()
            .iter()
            .zip(g.value(out.fps).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn consistent_relabeling_commutes() {
        let (store, dual, x) = dual_setup();
        let f = TokenOrdering {
            kind: OrderingKind::Fps,
            order: vec![2, 0, 5, 1, 4, 3],
        };
        let n = TokenOrdering {
            kind: OrderingKind::Nps,
            order: vec![0, 1, 3, 2, 5, 4],
        };
        // Relabel tokens by sigma: new token j is old token sigma[j].
        let sigma = [3usize, 5, 0, 1, 2, 4];
        let mut inv = [0usize; 6];
        for (j, &s) in sigma.iter().enumerate() {
            inv[s] = j;
        }
        let relabel = |o: &TokenOrdering| TokenOrdering {
            kind: o.kind,
            order: o.order.iter().map(|&t| inv[t]).collect(),
        };
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let xs = g.permute_rows(xv, &sigma).unwrap();
        let a = dual.forward(&mut g, &store, xv, &f, &n).unwrap();
        let b = dual.forward(&mut g, &store, xs, &relabel(&f), &relabel(&n)).unwrap();
        let back = g.permute_rows(a.fused, &sigma).unwrap();
        let diff: f64 = g
            .value(back)
            .data()
            .iter()
            .zip(g.value(b.fused).data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn bad_ordering_rejected() {
        let (store, dual, x) = dual_setup();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let bad = TokenOrdering {
            kind: OrderingKind::Fps,
            order: vec![0, 0, 1, 2, 3, 4],
        };
        let id = TokenOrdering::identity(OrderingKind::Nps, 6);
        assert!(dual.forward(&mut g, &store, xv, &bad, &id).is_err());
    }
}
