//! Independent reference implementations compared against the library.

use freehand::mamba::Ssm;
use freehand::metrics::compute_metrics;
use freehand::pose::{accumulate, PlaneExtent, Pose6DoF, Trajectory};
use freehand::sampling::{dbscan, fps, PointSet};
use freehand::tensor::{Graph, ParamStore, RngKey, Tensor};
use rand::Rng;

/// Greedy max-min selection that recomputes every candidate's distance to
/// the chosen set from scratch.
fn brute_force_fps(points: &[(usize, usize)], n: usize, start: usize) -> Vec<(usize, usize)> {
    let d = |a: (usize, usize), b: (usize, usize)| {
        let (dx, dy) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
        (dx * dx + dy * dy).sqrt()
    };
    let mut chosen = vec![start];
    while chosen.len() < n {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen.iter().map(|&c| d(points[i], points[c])).fold(f64::INFINITY, f64::min);
            if m > best_d {
                best_d = m;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen.iter().map(|&i| points[i]).collect()
}

/// Returns the number of cases compared.
pub fn fps_matches_brute_force() -> usize {
    let mut rng = RngKey::new(21).rng();
    let mut cases = 0;
    for size in 1..=64 {
        for _ in 0..3 {
            let pts: Vec<(usize, usize)> = (0..size).map(|_| (rng.random_range(0..16), rng.random_range(0..16))).collect();
            let n = rng.random_range(1..=size);
            let start = rng.random_range(0..size);
            let got = fps(&PointSet::new(pts.clone()), n, start).unwrap();
            assert_eq!(got.points, brute_force_fps(&pts, n, start), "size {size} n {n} start {start}");
            cases += 1;
        }
    }
    cases
}

fn random_trajectory(seed: u64, len: usize) -> Trajectory {
    let mut rng = RngKey::new(seed).rng();
    let rel: Vec<Pose6DoF> = (0..len - 1)
        .map(|_| {
            Pose6DoF::new(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.5)],
                [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            )
        })
        .collect();
    accumulate(&rel)
}

/// All eight metrics by explicit loops over homogeneous pose matrices.
fn metrics_oracle(pred: &Trajectory, gt: &Trajectory, extent: PlaneExtent) -> [f64; 8] {
    let corners = extent.corners();
    let points = |t: &Trajectory| -> Vec<Vec<[f64; 3]>> {
        t.poses()
            .iter()
            .map(|p| {
                let m = p.matrix();
                corners
                    .iter()
                    .map(|c| {
                        let mut out = [0.0; 3];
                        for (r, o) in out.iter_mut().enumerate() {
                            *o = m[(r, 0)] * c[0] + m[(r, 1)] * c[1] + m[(r, 2)] * c[2] + m[(r, 3)];
                        }
                        out
                    })
                    .collect()
            })
            .collect()
    };
    let (a, b) = (points(pred), points(gt));
    let dist = |x: &[f64; 3], y: &[f64; 3]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
    let n = a.len();
    let mut drift = vec![0.0; n];
    for i in 0..n {
        for k in 0..4 {
            drift[i] += dist(&a[i][k], &b[i][k]) / 4.0;
        }
    }
    let mut path = vec![0.0; n];
    for i in 1..n {
        let rel = gt.poses()[i - 1].inverse().compose(&gt.poses()[i]);
        path[i] = path[i - 1] + (rel.tx * rel.tx + rel.ty * rel.ty + rel.tz * rel.tz).sqrt();
    }
    let (mut adr, mut counted) = (0.0, 0.0);
    for i in 0..n {
        if path[i] > 0.0 {
            adr += drift[i] / path[i];
            counted += 1.0;
        }
    }
    let (fa, fb) = (a.concat(), b.concat());
    let mut hd: f64 = 0.0;
    for (x, y) in [(&fa, &fb), (&fb, &fa)] {
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                best = best.min(dist(p, q));
            }
            hd = hd.max(best);
        }
    }
    let mut mea = 0.0;
    for i in 1..n {
        let (p, q) = (pred.poses()[i], gt.poses()[i]);
        for (x, y) in [(p.rx, q.rx), (p.ry, q.ry), (p.rz, q.rz)] {
            let mut e = (x - y) % 360.0;
            if e > 180.0 {
                e -= 360.0;
            }
            if e <= -180.0 {
                e += 360.0;
            }
            mea += e.abs();
        }
    }
    let sum: f64 = drift.iter().sum();
    [
        sum / n as f64,
        drift[n - 1],
        100.0 * drift[n - 1] / path[n - 1],
        100.0 * adr / counted,
        drift.iter().copied().fold(0.0, f64::max),
        sum,
        hd,
        mea / (3.0 * (n - 1) as f64),
    ]
}

/// Largest relative deviation seen; asserts it stays within 1e-12.
pub fn metrics_match_double_loop() -> f64 {
    let extent = PlaneExtent::new(32.0, 32.0);
    let mut worst: f64 = 0.0;
    for seed in 0..25 {
        let gt = random_trajectory(seed, 15);
        let pred = random_trajectory(seed + 500, 15);
        let got = compute_metrics(&pred, &gt, extent, "oracle").unwrap().values();
        for (a, b) in got.iter().zip(metrics_oracle(&pred, &gt, extent)) {
            let dev = (a - b).abs() / b.abs().max(1.0);
            assert!(dev <= 1e-12, "{a} vs {b}");
            worst = worst.max(dev);
        }
    }
    worst
}

/// Largest absolute deviation from a hand-unrolled recurrence.
pub fn ssm_matches_unrolled() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, window) in [(1, None), (2, Some(3)), (3, Some(1)), (4, Some(7))] {
        let (d_in, d_state, d_out, steps) = (3, 4, 2, 7);
        let mut store = ParamStore::new();
        let ssm = Ssm::new(&mut store, "ssm", d_in, d_state, d_out, RngKey::new(seed));
        let x = Tensor::new(
            [steps, d_in],
            (0..steps * d_in).map(|i| (i as f64 * 0.61 + seed as f64).sin()).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = ssm.forward(&mut g, &store, xv, window).unwrap();
        let (a, b, c, d) = (
            store.get(ssm.a).data(),
            store.get(ssm.b).data(),
            store.get(ssm.c).data(),
            store.get(ssm.d).data(),
        );
        let mut h = vec![0.0; d_state];
        for t in 0..steps {
            let xt = &x.data()[t * d_in..(t + 1) * d_in];
            let reset = window.is_some_and(|k| t % k == 0);
            let mut next = vec![0.0; d_state];
            for i in 0..d_state {
                if !reset && t > 0 {
                    for j in 0..d_state {
                        next[i] += a[i * d_state + j] * h[j];
                    }
                }
                for j in 0..d_in {
                    next[i] += b[i * d_in + j] * xt[j];
                }
            }
            h = next;
            for o in 0..d_out {
                let mut want = 0.0;
                for i in 0..d_state {
                    want += c[o * d_state + i] * h[i];
                }
                for j in 0..d_in {
                    want += d[o * d_in + j] * xt[j];
                }
                let dev = (g.value(y).data()[t * d_out + o] - want).abs();
                assert!(dev <= 1e-12, "step {t} output {o}: {dev}");
                worst = worst.max(dev);
            }
        }
    }
    worst
}

/// Cluster assignment by seeded region growing: each unvisited core point
/// starts a cluster that absorbs every point reachable through core points.
fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let close = |i: usize, j: usize| {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts).collect();
    let mut label = vec![None; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || label[seed].is_some() {
            continue;
        }
        let mut frontier = vec![seed];
        label[seed] = Some(next);
        let mut k = 0;
        while k < frontier.len() {
            let p = frontier[k];
            k += 1;
            if !core[p] {
                continue;
            }
            for q in 0..n {
                if close(p, q) && label[q].is_none() {
                    label[q] = Some(next);
                    frontier.push(q);
                }
            }
        }
        next += 1;
    }
    label
}

/// Returns the number of point sets compared.
pub fn dbscan_matches_oracle() -> usize {
    let mut rng = RngKey::new(33).rng();
    let mut cases = 0;
    for _ in 0..60 {
        let blobs = rng.random_range(1..4);
        let mut pts = Vec::new();
        for b in 0..blobs {
            let centre = [b as f64 * 6.0, rng.random_range(-1.0..1.0)];
            for _ in 0..rng.random_range(3..12) {
                pts.push(vec![centre[0] + rng.random_range(-1.0..1.0), centre[1] + rng.random_range(-1.0..1.0)]);
            }
        }
        for _ in 0..rng.random_range(0..4) {
            pts.push(vec![rng.random_range(-5.0..20.0), rng.random_range(-5.0..5.0)]);
        }
        let (eps, min_pts) = (rng.random_range(0.5..1.5), rng.random_range(2..5));
        assert_eq!(dbscan(&pts, eps, min_pts), dbscan_oracle(&pts, eps, min_pts));
        cases += 1;
    }
    cases
}
