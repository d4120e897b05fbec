//! Fits `y = 2x - 1` with the reverse-mode graph and AdamW.

use freehand::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xs: Vec<f64> = (0..16).map(|i| i as f64 / 8.0 - 1.0).collect();
    let x = Tensor::new([16, 1], xs.clone())?;
    let y = Tensor::new([16, 1], xs.iter().map(|v| 2.0 * v - 1.0).collect())?;

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros([1, 1]));
    let b = store.add("b", Tensor::zeros([1]));
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &store,
    )?;
    for step in 0..300 {
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone())?, g.constant(y.clone())?);
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let pred = g.affine(xv, wv, bv)?;
        let err = g.sub(pred, yv)?;
        let loss = g.sum_squares(err)?;
        let grads = g.backward(loss)?;
        let param_grads = g.param_grads(&grads, &store);
        opt.step(&mut store, &param_grads)?;
        if step % 100 == 0 {
            println!("step {step:3} loss {:.6}", g.value(loss).item());
        }
    }
    println!("w = {:.4}, b = {:.4}", store.get(w).item(), store.get(b).item());
    Ok(())
}
