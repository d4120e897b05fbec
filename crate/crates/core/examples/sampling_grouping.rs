//! Gradient-guided point sampling on one frame, then contrastive embeddings
//! and density grouping over a back-and-forth sweep.

use freehand::flow::sequence_flows;
use freehand::model::pipeline::truth_trajectory;
use freehand::sampling::{
    axial_velocities, default_tau, fps_high_gradient, group_frames, nps, train_embedding, ContrastiveConfig,
    GroupingConfig, SequenceView,
};
use freehand::synth::{generate, MotionModel, SweepSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = SweepSpec::linear(36, 0.5, 3);
    spec.width = 32;
    spec.height = 32;
    spec.motion = MotionModel::BackAndForth { turns: vec![18] };
    let seq = generate(&spec)?;

    let frame = &seq.frames[0];
    let tau = default_tau(frame);
    let far = fps_high_gradient(frame, tau, 12);
    let near = nps(frame, tau, 4)?;
    println!("tau {tau:.4}: {} farthest points, {} neighbourhood points", far.len(), near.len());
    println!("first farthest points {:?}", &far.points[..4]);

    let flows = sequence_flows(&seq.frames)?;
    let view = SequenceView {
        frames: &seq.frames,
        flows: &flows,
    };
    let (encoder, report) = train_embedding(
        &[view],
        ContrastiveConfig {
            iterations: 60,
            ..ContrastiveConfig::default()
        },
    )?;
    println!("triplet loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
    let embeddings = encoder.embed(view)?;
    let velocity = axial_velocities(&truth_trajectory(&seq.gt_relatives).relatives());
    for g in group_frames(&embeddings, &velocity, &GroupingConfig::default()) {
        println!("group {} {:?}: frames {:?}", g.id, g.label, g.members);
    }
    Ok(())
}
