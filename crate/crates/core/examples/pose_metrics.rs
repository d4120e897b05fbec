//! Chains relative motions into a trajectory and scores a drifting estimate.

use freehand::metrics::{compute_metrics, format_table};
use freehand::pose::{accumulate, format_trajectory, PlaneExtent, Pose6DoF};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let step = Pose6DoF::new([0.0, 0.0, 0.5], [0.2, 0.0, 0.0]);
    let truth = accumulate(&vec![step; 20]);
    // Slightly too fast and rotating the wrong way.
    let biased = Pose6DoF::new([0.0, 0.02, 0.55], [0.15, 0.05, 0.0]);
    let estimate = accumulate(&vec![biased; 20]);

    print!("{}", format_trajectory(&estimate.poses()[..4], Some("tx ty tz rx ry rz")));
    let extent = PlaneExtent::new(32.0, 32.0);
    let report = compute_metrics(&estimate, &truth, extent, "drifting")?;
    print!("{}", format_table(&[report], None));
    println!("path length {:.2} mm", truth.path_length());
    Ok(())
}
