//! Gate boundaries, session transitions and loss identities.

use std::collections::HashSet;

use freehand::hitl::{gate, GateLevel, Mode, Session, SessionConfig, Thresholds};
use freehand::model::losses::{loss_corr, loss_mse, loss_point, loss_velocity};
use freehand::pose::{CornerSet, PlaneExtent, Pose6DoF};
use freehand::synth::{generate, SweepSpec};
use freehand::tensor::{RngKey, Tensor};
use rand::Rng;

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Checks values on and one ulp either side of both thresholds, plus the
/// extremes, against the rule `safe < tau1 <= caution < tau2 <= critical`.
/// Returns the number of probes.
pub fn gate_boundaries() -> usize {
    let mut rng = RngKey::new(8).rng();
    let mut probes = 0;
    for _ in 0..200 {
        let tau1 = rng.random_range(1e-6..10.0);
        let tau2 = tau1 * rng.random_range(1.000001..50.0);
        let t = Thresholds::new(tau1, tau2).unwrap();
        let expect = |s: f64| {
            if s < tau1 {
                GateLevel::Safe
            } else if s < tau2 {
                GateLevel::Caution
            } else {
                GateLevel::Critical
            }
        };
        for s in [
            0.0,
            next_down(tau1),
            tau1,
            next_up(tau1),
            0.5 * (tau1 + tau2),
            next_down(tau2),
            tau2,
            next_up(tau2),
            f64::MAX,
            f64::INFINITY,
        ] {
            assert_eq!(gate(s, &t), expect(s), "sigma2 {s} with {t:?}");
            probes += 1;
        }
        assert_eq!(gate(f64::NAN, &t), GateLevel::Critical);
        probes += 1;
    }
    for (a, b) in [(0.0, 1.0), (1.0, 1.0), (2.0, 1.0), (-1.0, 1.0), (f64::NAN, 1.0), (1.0, f64::INFINITY)] {
        assert!(Thresholds::new(a, b).is_err());
    }
    probes
}

pub const SAFE: Thresholds = Thresholds { tau1: 1e9, tau2: 2e9 };
pub const CAUTION: Thresholds = Thresholds { tau1: 1e-300, tau2: 1e9 };
pub const CRITICAL: Thresholds = Thresholds {
    tau1: 1e-300,
    tau2: 2e-300,
};

/// Drives a session through every (mode, gate) pair and returns the share of
/// the six possible transitions that were exercised.
pub fn session_transitions() -> f64 {
    let est = super::small_estimator(5);
    let mut spec = SweepSpec::linear(9, 0.5, 2);
    spec.width = 32;
    spec.height = 32;
    let frames = generate(&spec).unwrap().frames;
    let mut s = Session::new(est, SessionConfig::default()).unwrap();
    let plan = [SAFE, SAFE, CAUTION, CAUTION, CRITICAL, SAFE, CRITICAL, SAFE];
    for (f, t) in frames.into_iter().zip(plan) {
        s.set_thresholds(t);
        let before = s.mode();
        let out = s.step(f).unwrap();
        let level = out.report.gate;
        assert_eq!(out.accepted(), level == GateLevel::Safe);
        assert_eq!(out.prompt.is_some(), level != GateLevel::Safe);
        if level == GateLevel::Critical {
            assert_eq!(out.prompt.as_ref().unwrap().message.as_bytes(), b"Reacquire at same location");
        }
        assert_eq!(s.transitions().last(), Some(&(before, level, out.mode)));
    }
    let all: HashSet<(Mode, GateLevel)> = [Mode::Live, Mode::AwaitingCorrection]
        .into_iter()
        .flat_map(|m| GateLevel::ALL.into_iter().map(move |l| (m, l)))
        .collect();
    let seen: HashSet<(Mode, GateLevel)> = s.transitions().iter().map(|&(m, l, _)| (m, l)).collect();
    for &(m, l, after) in s.transitions() {
        let want = if l == GateLevel::Safe { Mode::Live } else { Mode::AwaitingCorrection };
        assert_eq!(after, want, "{m:?} --{l:?}--> {after:?}");
    }
    seen.intersection(&all).count() as f64 / all.len() as f64
}

fn random_poses(seed: u64, n: usize) -> Vec<Pose6DoF> {
    let mut rng = RngKey::new(seed).rng();
    (0..n)
        .map(|_| {
            Pose6DoF::new(
                [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
            )
        })
        .collect()
}

/// Returns the number of sampled cases.
pub fn loss_identities() -> usize {
    let extent = PlaneExtent::new(32.0, 32.0);
    let corners = |poses: &[Pose6DoF]| -> Vec<CornerSet> {
        poses
            .iter()
            .map(|p| CornerSet {
                points: extent.corners().map(|c| p.apply(c)),
            })
            .collect()
    };
    let mut rng = RngKey::new(12).rng();
    let mut cases = 0;
    for seed in 0..100 {
        let n = 2 + seed as usize % 7;
        let gt = random_poses(seed, n);
        let pred = random_poses(seed + 1000, n);
        assert_eq!(loss_point(&corners(&gt), &corners(&gt)).unwrap(), 0.0);
        assert_eq!(loss_velocity(&gt, &gt).unwrap(), 0.0);
        let offset: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let shifted: Vec<Pose6DoF> = gt
            .iter()
            .map(|p| {
                let a = p.to_array();
                Pose6DoF::from_array(std::array::from_fn(|k| a[k] + offset[k]))
            })
            .collect();
        assert!(loss_velocity(&shifted, &gt).unwrap() <= 1e-12);
        assert!(loss_point(&corners(&pred), &corners(&gt)).unwrap() >= 0.0);
        assert!(loss_velocity(&pred, &gt).unwrap() >= 0.0);
        assert!(loss_mse(&pred, &gt).unwrap() >= 0.0);
        let a = Tensor::new([n, 4], (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new([n, 4], (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let corr = loss_corr(&a, &b).unwrap();
        assert!((0.0..=2.0 + 1e-12).contains(&corr), "{corr}");
        assert!(loss_corr(&a, &a).unwrap().abs() <= 1e-12);
        cases += 1;
    }
    cases
}
