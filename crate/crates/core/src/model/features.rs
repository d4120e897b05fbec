//! Patch tokens with a 3-D sinusoidal position code, and the learned blend
//! between image tokens and flow tokens.

use std::rc::Rc;

use crate::nn::{Linear, MapDims};
use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Position code for `(t, i, j)`. Channels cycle through the three axes
/// (channel `k` encodes axis `k % 3`); within an axis, consecutive channels
/// alternate sine and cosine at geometrically decreasing frequencies.
pub fn positional_encoding(t: usize, i: usize, j: usize, width: usize) -> Vec<f64> {
    let pos = [t as f64, i as f64, j as f64];
    let band_len = |b: usize| (width + 2 - b) / 3;
    (0..width)
        .map(|k| {
            let (b, q) = (k % 3, k / 3);
            let n = band_len(b).max(1) as f64;
            let freq = 10000f64.powf(-(2.0 * (q / 2) as f64) / n);
            let x = pos[b] * freq;
            if q % 2 == 0 {
                x.sin()
            } else {
                x.cos()
            }
        })
        .collect()
}

/// Position codes for every token of a `[frames, grid, grid]` layout.
pub fn positional_table(frames: usize, grid_h: usize, grid_w: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * grid_h * grid_w * width);
    for t in 0..frames {
        for i in 0..grid_h {
            for j in 0..grid_w {
                data.extend(positional_encoding(t, i, j, width));
            }
        }
    }
    Tensor::new([frames * grid_h * grid_w, width], data).expect("table shape")
}

/// Cuts `[batch * h * w, c]` maps into non-overlapping `patch x patch`
/// patches, projects them and adds the position code. Tokens are ordered
/// by frame, then patch row, then patch column.
pub fn embed_patches(
    g: &mut Graph,
    store: &ParamStore,
    proj: &Linear,
    x: Var,
    dims: MapDims,
    patch: usize,
) -> Result<Var> {
    if patch == 0 || !dims.height.is_multiple_of(patch) || !dims.width.is_multiple_of(patch) {
        return Err(TensorError::Invalid(format!(
            "patch {patch} does not divide {}x{}",
            dims.height, dims.width
        )));
    }
    let c = g.value(x).cols();
    let (gh, gw) = (dims.height / patch, dims.width / patch);
    let tokens = if patch == 1 {
        x
    } else {
        let mut idx = Vec::with_capacity(dims.batch * dims.height * dims.width * c);
        for b in 0..dims.batch {
            for pi in 0..gh {
                for pj in 0..gw {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let pix = (b * dims.height + pi * patch + dy) * dims.width + pj * patch + dx;
                            idx.extend((0..c).map(|ch| pix * c + ch));
                        }
                    }
                }
            }
        }
        let idx: Rc<[usize]> = idx.into();
        g.gather(x, idx, vec![dims.batch * gh * gw, patch * patch * c])?
    };
    let projected = proj.forward(g, store, tokens)?;
    let pe = g.constant(positional_table(dims.batch, gh, gw, proj.fan_out))?;
    g.add(projected, pe)
}

/// `a * learned + (1 - a) * flow` with `a = sigmoid([learned, flow] W + b)`.
/// Returns the blend and the blend weight `a`.
pub fn blend_flow(g: &mut Graph, store: &ParamStore, blend: &Linear, learned: Var, flow: Var) -> Result<(Var, Var)> {
    if g.shape(learned) != g.shape(flow) {
        return Err(TensorError::ShapeMismatch {
            op: "blend_flow",
            lhs: g.shape(learned).to_vec(),
            rhs: g.shape(flow).to_vec(),
        });
    }
    let both = g.concat_cols(&[learned, flow])?;
    let logits = blend.forward(g, store, both)?;
    let a = g.sigmoid(logits)?;
    let x = g.mul(a, learned)?;
    let rest = g.one_minus(a)?;
    let y = g.mul(rest, flow)?;
    Ok((g.add(x, y)?, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngKey;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn zero_input_gives_position_code() {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 8, 12, 1.0, RngKey::new(0));
        let dims = MapDims {
            batch: 2,
            height: 4,
            width: 4,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([32, 2])).unwrap();
        let e = embed_patches(&mut g, &store, &proj, x, dims, 2).unwrap();
        assert_eq!(g.shape(e), &[2 * 2 * 2, 12]);
        assert_eq!(g.value(e), &positional_table(2, 2, 2, 12));
        let bad = MapDims { width: 5, ..dims };
        let x5 = g.constant(Tensor::zeros([40, 2])).unwrap();
        assert!(embed_patches(&mut g, &store, &proj, x5, bad, 2).is_err());
    }

    #[test]
    fn patch_gather_layout() {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 4, 4, 1.0, RngKey::new(0));
        let w = store.get_mut(proj.weight).data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..4 {
            w[k * 4 + k] = 1.0;
        }
        let dims = MapDims {
            batch: 1,
            height: 2,
            width: 4,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([8, 1], (0..8).map(f64::from).collect()).unwrap()).unwrap();
        let e = embed_patches(&mut g, &store, &proj, x, dims, 2).unwrap();
        let pe = positional_table(1, 1, 2, 4);
        let got: Vec<f64> = g.value(e).data().iter().zip(pe.data()).map(|(a, b)| a - b).collect();
        assert_eq!(got, vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn position_codes_never_collide() {
        let n = 64;
        let mut seen = HashSet::with_capacity(n * n * n);
        for t in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let key: Vec<i64> = positional_encoding(t, i, j, 32)
                        .iter()
                        .map(|v| (v * 1e9).round() as i64)
                        .collect();
                    assert!(seen.insert(key), "collision at ({t}, {i}, {j})");
                }
            }
        }
    }

    fn blend_setup(w: f64, b: f64) -> (ParamStore, Linear) {
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "blend", 6, 3, 1.0, RngKey::new(0));
        store.get_mut(l.weight).data_mut().iter_mut().for_each(|v| *v = w);
        store.get_mut(l.bias).data_mut().iter_mut().for_each(|v| *v = b);
        (store, l)
    }

    fn run_blend(store: &ParamStore, l: &Linear, a: &Tensor, f: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (av, fv) = (g.constant(a.clone()).unwrap(), g.constant(f.clone()).unwrap());
        let (out, _) = blend_flow(&mut g, store, l, av, fv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn blend_extremes_and_midpoint() {
        let a = Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let f = Tensor::new([2, 3], vec![-1.0, 4.0, 0.0, 2.0, 1.0, 1.0]).unwrap();
        let (s, l) = blend_setup(0.0, 60.0);
        assert_eq!(run_blend(&s, &l, &a, &f), a);
        let (s, l) = blend_setup(0.0, -60.0);
        let out = run_blend(&s, &l, &a, &f);
        assert!(out.data().iter().zip(f.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        let (s, l) = blend_setup(0.0, 0.0);
        let out = run_blend(&s, &l, &a, &f);
        for i in 0..6 {
            assert!((out.data()[i] - 0.5 * (a.data()[i] + f.data()[i])).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn blend_is_convex(vals in prop::collection::vec(-5.0..5.0f64, 12), seed in 0u64..100) {
            let mut store = ParamStore::new();
            let l = Linear::new(&mut store, "blend", 6, 3, 3.0, RngKey::new(seed));
            let a = Tensor::new([2, 3], vals[..6].to_vec()).unwrap();
            let f = Tensor::new([2, 3], vals[6..].to_vec()).unwrap();
            let out = run_blend(&store, &l, &a, &f);
            for i in 0..6 {
                let (lo, hi) = (a.data()[i].min(f.data()[i]), a.data()[i].max(f.data()[i]));
                prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }
    }
}
