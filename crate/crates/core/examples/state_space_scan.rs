//! Runs the two-ordering state-space block over a handful of tokens.

use freehand::mamba::{derive_orderings, DualSsm, Ssm};
use freehand::tensor::{Graph, ParamStore, RngKey, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (tokens, width) = (6, 4);
    let x = Tensor::new(
        [tokens, width],
        (0..tokens * width).map(|i| (i as f64 * 0.7).sin()).collect(),
    )?;
    let embeddings: Vec<Vec<f64>> = (0..tokens).map(|i| vec![(i as f64 - 2.5).abs(), 0.1 * i as f64]).collect();
    let (fps, nps) = derive_orderings(&embeddings);
    println!("farthest-first order {:?}", fps.order);
    println!("nearest-neighbour order {:?}", nps.order);

    let mut store = ParamStore::new();
    let scan = Ssm::new(&mut store, "scan", width, 8, width, RngKey::new(1));
    let dual = DualSsm::new(&mut store, "dual", width, 8, RngKey::new(2));
    println!("transition spectral radius {:.3}", scan.spectral_radius(&store));
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let inner = scan.forward(&mut g, &store, xv, Some(3))?;
    let out = dual.forward(&mut g, &store, inner, &fps, &nps)?;
    for t in 0..tokens {
        println!("token {t}: gate {:.3}  fused {:?}", g.value(out.gate).row(t)[0], g.value(out.fused).row(t).iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }
    Ok(())
}
