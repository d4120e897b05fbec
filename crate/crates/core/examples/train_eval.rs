//! Trains a small model on 32x32 sweeps and scores it on held-out ones.

use freehand::model::pipeline::Estimator;
use freehand::model::train::{TrainConfig, Trainer};
use freehand::model::ModelConfig;
use freehand::sampling::ContrastiveConfig;
use freehand::service::commands::evaluate;
use freehand::synth::{generate, sweep_family, SweepSequence};

fn sweeps(count: usize, seed: u64) -> Vec<SweepSequence> {
    sweep_family(count, 24, seed)
        .into_iter()
        .map(|mut s| {
            s.width = 32;
            s.height = 32;
            generate(&s).expect("valid family spec")
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = sweeps(6, 1);
    let held_out = sweeps(2, 99);
    let config = TrainConfig {
        model: ModelConfig {
            frame_size: 32,
            ..ModelConfig::default()
        },
        stages: vec![3, 5],
        epochs_per_stage: 4,
        contrastive: ContrastiveConfig {
            iterations: 40,
            ..ContrastiveConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &train, &held_out)?;
    println!("untrained held-out DE {:.3} mm", trainer.validation_de()?.unwrap_or(f64::NAN));
    while !trainer.is_done() {
        let r = trainer.run_epoch()?;
        println!(
            "epoch {:2} window {} loss {:.4} held-out DE {:.3}",
            r.epoch,
            r.window_len,
            r.loss_total,
            r.val_de.unwrap_or(f64::NAN)
        );
    }
    let est = Estimator {
        model: trainer.model,
        encoder: trainer.encoder,
        grouping: trainer.config.grouping,
    };
    let named: Vec<(String, SweepSequence)> = held_out.into_iter().enumerate().map(|(i, s)| (format!("held_out_{i}"), s)).collect();
    print!("{}", evaluate(&est, &named, None)?.table());
    Ok(())
}
