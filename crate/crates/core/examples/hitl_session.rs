//! Calibrates the gate on clean sweeps, then feeds a sweep with a speed
//! burst through a live session.

use std::sync::Arc;

use freehand::hitl::{calibrate_thresholds, sweep_variances, McConfig, Session, SessionConfig};
use freehand::model::pipeline::Estimator;
use freehand::model::{ModelConfig, PoseModel};
use freehand::sampling::{ContrastiveConfig, ContrastiveEncoder, GroupingConfig};
use freehand::synth::{generate, SpeedBurst, SweepSpec};

fn spec(seed: u64) -> SweepSpec {
    let mut s = SweepSpec::linear(24, 0.5, seed);
    s.width = 32;
    s.height = 32;
    s.noise_std = 0.02;
    s
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // An untrained model keeps the example fast; load a checkpoint with
    // `service::commands::load_estimator` for meaningful variances.
    let est = Arc::new(Estimator {
        model: PoseModel::new(
            ModelConfig {
                frame_size: 32,
                ..ModelConfig::default()
            },
            3,
        )?,
        encoder: ContrastiveEncoder::new(ContrastiveConfig::default()),
        grouping: GroupingConfig::default(),
    });
    let mc = McConfig::default();
    let mut clean = Vec::new();
    for seed in 0..4 {
        clean.extend(sweep_variances(Arc::clone(&est), &generate(&spec(seed))?.frames, &mc, 7)?);
    }
    let thresholds = calibrate_thresholds(&clean, 0.9, 0.99)?;
    println!("tau1 {:.3e}  tau2 {:.3e}", thresholds.tau1, thresholds.tau2);

    let mut rushed = spec(10);
    rushed.bursts.push(SpeedBurst {
        start: 12,
        end: 18,
        multiplier: 4.0,
    });
    let mut session = Session::new(
        est,
        SessionConfig {
            thresholds,
            mc,
            ..SessionConfig::default()
        },
    )?;
    for frame in generate(&rushed)?.frames {
        let out = session.step(frame)?;
        let r = &out.report;
        let prompt = out.prompt.map(|p| format!("  -> {}", p.message)).unwrap_or_default();
        println!("frame {:2} sigma2 {:.3e} {:?}{prompt}", r.frame, r.sigma2, r.gate);
    }
    println!(
        "scored {} accepted {} prompts {}",
        session.frames_scored(),
        session.accepted_frames(),
        session.prompts_issued()
    );
    Ok(())
}
