//! One PASS/FAIL line per primary criterion. Lines go straight to stderr so
//! they show up without `--nocapture`.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use common::{gradcheck, oracles, properties};
use freehand::hitl::{gate, sweep_variances, GateLevel, McConfig, Session, SessionConfig};
use freehand::model::pipeline::Estimator;
use freehand::model::train::{TrainConfig, Trainer};
use freehand::service::commands::calibrate;
use freehand::service::CalibrateConfig;
use freehand::synth::{generate, perturb, sweep_family, Perturbation, SpeedBurst, SweepSequence};

type Outcome = Result<String, String>;

fn report(name: &str, check: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(check)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("{tag} {name}: {detail} [{:.1} s]\n", started.elapsed().as_secs_f64());
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    outcome.is_ok()
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    gradcheck::elementwise_ops();
    gradcheck::broadcast_and_matrix_ops();
    gradcheck::reductions_and_layout_ops();
    gradcheck::layers();
    gradcheck::state_space_scans_and_attention();
    gradcheck::full_pose_network_with_losses();
    gradcheck::full_contrastive_encoder();
    let secs = t.elapsed().as_secs_f64();
    let detail = format!("every graph op plus the full pose and encoder stacks within 1e-4 relative in {secs:.2} s");
    if secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_suite() -> Outcome {
    let fps = oracles::fps_matches_brute_force();
    let metrics = oracles::metrics_match_double_loop();
    let ssm = oracles::ssm_matches_unrolled();
    let dbscan = oracles::dbscan_matches_oracle();
    Ok(format!(
        "FPS exact on {fps} sets, metrics max rel dev {metrics:.1e}, scan max dev {ssm:.1e}, DBSCAN exact on {dbscan} sets"
    ))
}

fn gate_suite() -> Outcome {
    let probes = properties::gate_boundaries();
    let coverage = properties::session_transitions();
    let detail = format!("{probes} boundary probes, {:.0}% of session transitions exercised", 100.0 * coverage);
    if coverage == 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn loss_suite() -> Outcome {
    let cases = properties::loss_identities();
    Ok(format!("{cases} random cases"))
}

fn sequences(count: usize, seed: u64) -> Vec<SweepSequence> {
    sweep_family(count, 40, seed).iter().map(|s| generate(s).unwrap()).collect()
}

fn curriculum() -> TrainConfig {
    TrainConfig {
        windows_per_sequence: 16,
        epochs_per_stage: 6,
        ..TrainConfig::default()
    }
}

fn training_smoke() -> Outcome {
    let t = Instant::now();
    let train = sequences(20, 1);
    let held_out = sequences(6, 99);
    let mut trainer = Trainer::new(curriculum(), &train, &held_out).map_err(|e| e.to_string())?;
    let before = trainer.validation_de().unwrap().unwrap();
    trainer.run().map_err(|e| e.to_string())?;
    let after = trainer.validation_de().unwrap().unwrap();
    let reduction = 1.0 - after / before;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "held-out DE {before:.3} -> {after:.3} mm ({:.1}% lower) after {} epochs in {minutes:.1} min",
        100.0 * reduction,
        trainer.history.len()
    );
    if reduction >= 0.3 && minutes < 15.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const BURST: SpeedBurst = SpeedBurst {
    start: 15,
    end: 25,
    multiplier: 4.0,
};

fn hitl_perturbation() -> Outcome {
    let mut trainer = Trainer::new(curriculum(), &sequences(40, 1), &sequences(2, 99)).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let est = Arc::new(Estimator {
        model: trainer.model.clone(),
        encoder: trainer.encoder.clone(),
        grouping: trainer.config.grouping,
    });
    let cfg = CalibrateConfig {
        safe_quantile: 0.9,
        critical_quantile: 0.99,
        mc: McConfig::default(),
        window: 7,
    };
    let cal = calibrate(Arc::clone(&est), &sequences(30, 20), &cfg).map_err(|e| e.to_string())?;
    let t = cal.thresholds;
    let (mut alarms, mut clean_frames, mut hits, mut burst_frames) = (0, 0, 0, 0);
    for clean in sequences(12, 30) {
        let v = sweep_variances(Arc::clone(&est), &clean.frames, &cfg.mc, cfg.window).unwrap();
        clean_frames += v.len();
        alarms += v.iter().filter(|s| gate(**s, &t) != GateLevel::Safe).count();
        let burst = perturb(&clean, Perturbation::SpeedBurst(BURST)).unwrap();
        let v = sweep_variances(Arc::clone(&est), &burst.frames, &cfg.mc, cfg.window).unwrap();
        for m in BURST.start..BURST.end {
            burst_frames += 1;
            hits += usize::from(gate(v[m - 1], &t) != GateLevel::Safe);
        }
    }
    let detection = hits as f64 / burst_frames as f64;
    let false_alarms = alarms as f64 / clean_frames as f64;

    let mut session = Session::new(
        est,
        SessionConfig {
            thresholds: properties::CRITICAL,
            ..SessionConfig::default()
        },
    )
    .unwrap();
    let frames = &sequences(1, 30)[0].frames;
    session.step(frames[0].clone()).unwrap();
    let prompt = session.step(frames[1].clone()).unwrap().prompt.unwrap();
    let exact = prompt.message.as_bytes() == b"Reacquire at same location";

    let detail = format!(
        "tau = ({:.3e}, {:.3e}) from {} clean frames; burst flagged {hits}/{burst_frames} ({:.1}%, need >= 90%), \
         clean false alarms {alarms}/{clean_frames} ({:.1}%, need <= 10%), critical prompt byte-equal: {exact}",
        t.tau1,
        t.tau2,
        cal.samples,
        100.0 * detection,
        100.0 * false_alarms
    );
    if detection >= 0.9 && false_alarms <= 0.1 && exact {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"generate": {"count": 3, "frames": 12},
            "train": {"stages": [3, 4], "epochs_per_stage": 1, "windows_per_sequence": 4,
                      "contrastive": {"iterations": 10}}}"#,
    )
    .unwrap();
    let run = |name: &str| -> Result<PathBuf, String> {
        let root = dir.path().join(name);
        let cli = |args: &[&str], out: &Path| -> Result<(), String> {
            let status = Command::new(env!("CARGO_BIN_EXE_freehand"))
                .args(args)
                .arg("--config")
                .arg(&config)
                .args(["--seed", "11", "--out"])
                .arg(out)
                .env("FREEHAND_LOG", "warn")
                .status()
                .map_err(|e| e.to_string())?;
            status.success().then_some(()).ok_or_else(|| format!("{args:?} exited with {status}"))
        };
        let (data, model, eval) = (root.join("data"), root.join("model"), root.join("eval"));
        cli(&["generate"], &data)?;
        cli(&["train", "--data", data.to_str().unwrap()], &model)?;
        cli(
            &["eval", "--checkpoint", model.to_str().unwrap(), "--data", data.to_str().unwrap()],
            &eval,
        )?;
        Ok(root)
    };
    let (a, b) = (tree(&run("a")?), tree(&run("b")?));
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let detail = format!("{} artifacts from generate, train and eval compared byte for byte", a.len());
    if a.len() == b.len() && differing.is_empty() && a.keys().any(|k| k.ends_with("checkpoint.bin")) {
        Ok(detail)
    } else {
        Err(format!("{detail}; differing: {differing:?}"))
    }
}

#[test]
fn primary_criteria() {
    let results = [
        report("gradient suite", gradient_suite),
        report("oracle suite", oracle_suite),
        report("gate and state machine", gate_suite),
        report("loss identities", loss_suite),
        report("end-to-end training smoke", training_smoke),
        report("HITL perturbation", hitl_perturbation),
        report("determinism", determinism),
    ];
    let passed = results.iter().filter(|r| **r).count();
    let line = format!("{passed}/{} primary criteria passed\n", results.len());
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert_eq!(passed, results.len(), "some primary criteria failed");
}
