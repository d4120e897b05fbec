//! Dense flow between consecutive frames of a sweep and its pooled features.

use freehand::flow::{estimate_flow, flow_features};
use freehand::synth::{generate, SweepSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = SweepSpec::linear(6, 0.5, 9);
    spec.direction = [1.0, 0.0, 0.3];
    let seq = generate(&spec)?;
    for pair in seq.frames.windows(2) {
        let field = estimate_flow(&pair[0], &pair[1])?;
        let feat = flow_features(&field, 4)?;
        let (n, u) = (field.u.len() as f64, field.u.iter().sum::<f64>());
        println!(
            "mean |flow| {:.3} px, mean u {:.3} px, {} pooled features",
            field.mean_magnitude(),
            u / n,
            feat.numel()
        );
    }
    Ok(())
}
