#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod properties;

use std::sync::Arc;

use freehand::model::pipeline::Estimator;
use freehand::model::{ModelConfig, PoseModel};
use freehand::sampling::{ContrastiveConfig, ContrastiveEncoder, GroupingConfig};

/// Untrained estimator for 32x32 frames.
pub fn small_estimator(seed: u64) -> Arc<Estimator> {
    let model = PoseModel::new(
        ModelConfig {
            frame_size: 32,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap();
    Arc::new(Estimator {
        model,
        encoder: ContrastiveEncoder::new(ContrastiveConfig::default()),
        grouping: GroupingConfig::default(),
    })
}
