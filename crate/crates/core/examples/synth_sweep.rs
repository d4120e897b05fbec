//! Renders a sweep with a speed burst and a contact loss, then writes it to
//! the directory given as the first argument (default `sweep_out`).

use freehand::synth::{generate, save_sequence, IntensityPerturbation, SpeedBurst, SweepSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sweep_out".into());
    let mut spec = SweepSpec::linear(30, 0.5, 4);
    spec.noise_std = 0.02;
    spec.drift_amplitude = 0.05;
    spec.bursts.push(SpeedBurst {
        start: 10,
        end: 15,
        multiplier: 4.0,
    });
    spec.perturbations.push(IntensityPerturbation::Contact {
        start: 20,
        end: 23,
        factor: 0.3,
    });
    let seq = generate(&spec)?;
    for (m, f) in seq.frames.iter().enumerate().step_by(3) {
        let rel = seq.gt_relatives.get(m).map_or(0.0, |p| p.translation_norm());
        println!("frame {m:2}  t {:.3} s  mean {:.3}  step {rel:.2} mm", f.timestamp, f.mean());
    }
    save_sequence(&seq, std::path::Path::new(&out))?;
    println!("wrote {} frames to {out}", seq.len());
    Ok(())
}
