//! 6-DoF rigid transforms, trajectories and image-plane corner propagation.
//!
//! A [`Pose6DoF`] stores translation in millimetres and intrinsic Z-Y-X Euler
//! angles in degrees, i.e. `R = Rz(rz) * Ry(ry) * Rx(rx)`. Composition follows
//! homogeneous matrix multiplication: `compose(a, b)` is `M(a) * M(b)`, so `b`
//! is expressed in the frame reached by `a`.

use std::fmt::Write as _;
use std::io::{self, BufRead};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("non-finite pose component")]
    NonFinite,
    #[error("trajectory must start at the identity transform")]
    NotAnchored,
    #[error("trajectory is empty")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Within this many degrees of |ry| = 90 the Euler decomposition is unreliable.
pub const GIMBAL_MARGIN_DEG: f64 = 0.5;

/// Maps an angle in degrees to (-180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r > 180.0 {
        r -= 360.0;
    } else if r <= -180.0 {
        r += 360.0;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl Pose6DoF {
    pub const IDENTITY: Pose6DoF = Pose6DoF {
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
    };

    /// Translation (mm) and Euler angles (deg); angles are wrapped.
    pub fn new(t: [f64; 3], r: [f64; 3]) -> Self {
        Self {
            tx: t[0],
            ty: t[1],
            tz: t[2],
            rx: wrap_degrees(r[0]),
            ry: wrap_degrees(r[1]),
            rz: wrap_degrees(r[2]),
        }
    }

    pub fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        Self::new([tx, ty, tz], [0.0; 3])
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.rx, self.ry, self.rz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn translation_norm(&self) -> f64 {
        (self.tx * self.tx + self.ty * self.ty + self.tz * self.tz).sqrt()
    }

    pub fn is_gimbal_adjacent(&self) -> bool {
        (self.ry.abs() - 90.0).abs() <= GIMBAL_MARGIN_DEG
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let (sx, cx) = self.rx.to_radians().sin_cos();
        let (sy, cy) = self.ry.to_radians().sin_cos();
        let (sz, cz) = self.rz.to_radians().sin_cos();
        Matrix3::new(
            cz * cy,
            cz * sy * sx - sz * cx,
            cz * sy * cx + sz * sx,
            sz * cy,
            sz * sy * sx + cz * cx,
            sz * sy * cx - cz * sx,
            -sy,
            cy * sx,
            cy * cx,
        )
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m[(0, 3)] = self.tx;
        m[(1, 3)] = self.ty;
        m[(2, 3)] = self.tz;
        m
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let ry = sy.asin();
        let (rx, rz) = if sy.abs() < 1.0 - 1e-12 {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            // Gimbal lock: only rx -/+ rz is observable; put it all in rx.
            (r[(0, 1)].atan2(r[(1, 1)]) * sy.signum(), 0.0)
        };
        Self::new(
            [t.x, t.y, t.z],
            [rx.to_degrees(), ry.to_degrees(), rz.to_degrees()],
        )
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        Self::from_rotation_translation(&r, &Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
    }

    pub fn compose(&self, other: &Pose6DoF) -> Pose6DoF {
        let ra = self.rotation();
        let r = ra * other.rotation();
        let t = ra * other.t_vec() + self.t_vec();
        Self::from_rotation_translation(&r, &t)
    }

    pub fn inverse(&self) -> Pose6DoF {
        let rt = self.rotation().transpose();
        Self::from_rotation_translation(&rt, &(-(rt * self.t_vec())))
    }

    pub fn t_vec(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation() * Vector3::new(p[0], p[1], p[2]) + self.t_vec();
        [q.x, q.y, q.z]
    }
}

/// Absolute poses, one per frame, anchored at the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<Pose6DoF>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose6DoF>) -> Result<Self, PoseError> {
        let first = poses.first().ok_or(PoseError::Empty)?;
        if first.to_array().iter().any(|v| v.abs() > 1e-9) {
            return Err(PoseError::NotAnchored);
        }
        if !poses.iter().all(Pose6DoF::is_finite) {
            return Err(PoseError::NonFinite);
        }
        Ok(Self { poses })
    }

    pub fn identity(len: usize) -> Self {
        Self {
            poses: vec![Pose6DoF::IDENTITY; len.max(1)],
        }
    }

    pub fn poses(&self) -> &[Pose6DoF] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last(&self) -> &Pose6DoF {
        self.poses.last().expect("trajectory is never empty")
    }

    pub fn push_relative(&mut self, rel: &Pose6DoF) {
        let next = self.last().compose(rel);
        self.poses.push(next);
    }

    /// Relative transform from frame `m - 1` to frame `m`, for `m >= 1`.
    pub fn relatives(&self) -> Vec<Pose6DoF> {
        self.poses
            .windows(2)
            .map(|w| w[0].inverse().compose(&w[1]))
            .collect()
    }

    /// Sum of per-step translation norms.
    pub fn path_length(&self) -> f64 {
        self.relatives().iter().map(Pose6DoF::translation_norm).sum()
    }

    /// Cumulative path length up to every frame (first entry is zero).
    pub fn cumulative_path(&self) -> Vec<f64> {
        let mut acc = 0.0;
        std::iter::once(0.0)
            .chain(self.relatives().iter().map(|r| {
                acc += r.translation_norm();
                acc
            }))
            .collect()
    }

    /// Expresses every pose relative to frame `anchor` (which becomes identity).
    pub fn reanchored(&self, anchor: usize) -> Trajectory {
        let inv = self.poses[anchor].inverse();
        Trajectory {
            poses: self.poses[anchor..].iter().map(|p| inv.compose(p)).collect(),
        }
    }

    pub fn has_gimbal_adjacent(&self) -> bool {
        self.poses.iter().any(Pose6DoF::is_gimbal_adjacent)
    }
}

/// Chains relative poses into an absolute trajectory starting at identity.
pub fn accumulate(relatives: &[Pose6DoF]) -> Trajectory {
    let mut traj = Trajectory::identity(1);
    for r in relatives {
        traj.push_relative(r);
    }
    traj
}

/// Physical size of the image plane in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneExtent {
    pub width_mm: f64,
    pub height_mm: f64,
}

impl PlaneExtent {
    pub fn new(width_mm: f64, height_mm: f64) -> Self {
        assert!(width_mm > 0.0 && height_mm > 0.0, "plane extent must be positive");
        Self {
            width_mm,
            height_mm,
        }
    }

    /// The four in-plane corners `(±w/2, ±h/2, 0)`.
    pub fn corners(&self) -> [[f64; 3]; 4] {
        let (w, h) = (self.width_mm / 2.0, self.height_mm / 2.0);
        [[-w, -h, 0.0], [w, -h, 0.0], [w, h, 0.0], [-w, h, 0.0]]
    }
}

/// The image-plane corners of one frame mapped into the reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerSet {
    pub points: [[f64; 3]; 4],
}

pub fn propagate_corners(traj: &Trajectory, extent: PlaneExtent) -> Vec<CornerSet> {
    let local = extent.corners();
    traj.poses()
        .iter()
        .map(|p| CornerSet {
            points: local.map(|c| p.apply(c)),
        })
        .collect()
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Renders poses as `tx ty tz rx ry rz` lines in fixed decimal.
pub fn format_trajectory(poses: &[Pose6DoF], header: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(h) = header {
        for line in h.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    for p in poses {
        let _ = writeln!(
            s,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.tx, p.ty, p.tz, p.rx, p.ry, p.rz
        );
    }
    s
}

/// Parses the trajectory text format; blank lines and `#` comments are skipped.
pub fn parse_poses<R: BufRead>(reader: R) -> Result<Vec<Pose6DoF>, PoseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals = body
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| PoseError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let arr: [f64; 6] = vals.try_into().map_err(|v: Vec<f64>| PoseError::Parse {
            line: i + 1,
            msg: format!("expected 6 values, found {}", v.len()),
        })?;
        let pose = Pose6DoF::from_array(arr);
        if !pose.is_finite() {
            return Err(PoseError::Parse {
                line: i + 1,
                msg: "non-finite value".into(),
            });
        }
        out.push(pose);
    }
    Ok(out)
}

pub fn read_trajectory(path: &std::path::Path) -> Result<Trajectory, PoseError> {
    let f = std::fs::File::open(path)?;
    Trajectory::new(parse_poses(io::BufReader::new(f))?)
}

pub fn write_trajectory(path: &std::path::Path, traj: &Trajectory, header: Option<&str>) -> Result<(), PoseError> {
    std::fs::write(path, format_trajectory(traj.poses(), header))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Pose6DoF, b: &Pose6DoF, tol: f64) -> bool {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .all(|(x, y)| (wrap_degrees(x - y)).abs() <= tol || (x - y).abs() <= tol)
    }

    fn mat_close(a: &Matrix4<f64>, b: &Matrix4<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn identity_is_neutral() {
        let p = Pose6DoF::new([1.0, -2.0, 3.0], [10.0, 20.0, -30.0]);
        assert!(close(&Pose6DoF::IDENTITY.compose(&p), &p, 1e-9));
        assert!(close(&p.compose(&Pose6DoF::IDENTITY), &p, 1e-9));
    }

    #[test]
    fn pure_translations_add() {
        let c = Pose6DoF::translation(1.0, 0.0, 0.0).compose(&Pose6DoF::translation(0.0, 2.0, 0.0));
        assert!(close(&c, &Pose6DoF::translation(1.0, 2.0, 0.0), 1e-12));
    }

    #[test]
    fn rotated_frame_translation() {
        let c = Pose6DoF::new([0.0; 3], [0.0, 0.0, 90.0]).compose(&Pose6DoF::translation(1.0, 0.0, 0.0));
        assert!(c.tx.abs() < 1e-9 && (c.ty - 1.0).abs() < 1e-9 && c.tz.abs() < 1e-9);
    }

    #[test]
    fn corner_under_quarter_turn() {
        let ext = PlaneExtent::new(32.0, 20.0);
        let traj = Trajectory::new(vec![
            Pose6DoF::IDENTITY,
            Pose6DoF::new([0.0; 3], [0.0, 0.0, 90.0]),
        ])
        .unwrap();
        let cs = propagate_corners(&traj, ext);
        // corner (w/2, h/2, 0) -> (-h/2, w/2, 0)
        let p = cs[1].points[2];
        assert!((p[0] + 10.0).abs() < 1e-9 && (p[1] - 16.0).abs() < 1e-9 && p[2].abs() < 1e-9);
        assert_eq!(cs[0].points, ext.corners());
    }

    #[test]
    fn accumulate_translations() {
        let rel = vec![Pose6DoF::translation(1.0, 0.0, 0.0); 4];
        let t = accumulate(&rel);
        for (m, p) in t.poses().iter().enumerate() {
            assert!((p.tx - m as f64).abs() < 1e-12);
        }
        assert_eq!(accumulate(&[]).len(), 1);
        assert!(accumulate(&vec![Pose6DoF::IDENTITY; 3])
            .poses()
            .iter()
            .all(|p| *p == Pose6DoF::IDENTITY));
    }

    #[test]
    fn trajectory_must_be_anchored() {
        assert!(matches!(
            Trajectory::new(vec![Pose6DoF::translation(1.0, 0.0, 0.0)]),
            Err(PoseError::NotAnchored)
        ));
        assert!(matches!(Trajectory::new(vec![]), Err(PoseError::Empty)));
    }

    #[test]
    fn text_format_round_trip_and_comments() {
        let poses = vec![
            Pose6DoF::IDENTITY,
            Pose6DoF::new([1.5, -2.25, 3.0], [1.0, -2.0, 179.5]),
        ];
        let text = format_trajectory(&poses, Some("two frames"));
        assert!(text.starts_with("# two frames\n"));
        let back = parse_poses(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(close(&back[1], &poses[1], 1e-9));
        assert!(parse_poses("1 2 3\n".as_bytes()).is_err());
        assert!(parse_poses("1 2 3 4 5 x\n".as_bytes()).is_err());
    }

    #[test]
    fn gimbal_flag() {
        assert!(Pose6DoF::new([0.0; 3], [0.0, 89.7, 0.0]).is_gimbal_adjacent());
        assert!(!Pose6DoF::new([0.0; 3], [0.0, 80.0, 0.0]).is_gimbal_adjacent());
    }

    fn pose_strategy() -> impl Strategy<Value = Pose6DoF> {
        (
            prop::array::uniform3(-50.0..50.0f64),
            -179.0..179.0f64,
            -85.0..85.0f64,
            -179.0..179.0f64,
        )
            .prop_map(|(t, rx, ry, rz)| Pose6DoF::new(t, [rx, ry, rz]))
    }

    proptest! {
        #[test]
        fn compose_matches_matrix_product(a in pose_strategy(), b in pose_strategy()) {
            let c = a.compose(&b);
            prop_assert!(mat_close(&c.matrix(), &(a.matrix() * b.matrix()), 1e-9));
        }

        #[test]
        fn compose_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(mat_close(&l.matrix(), &r.matrix(), 1e-9));
        }

        #[test]
        fn inverse_cancels(p in pose_strategy()) {
            let id = p.compose(&p.inverse());
            prop_assert!(mat_close(&id.matrix(), &Matrix4::identity(), 1e-9));
        }

        #[test]
        fn euler_round_trip(p in pose_strategy()) {
            let back = Pose6DoF::from_matrix(&p.matrix());
            prop_assert!(close(&back, &p, 1e-9), "{:?} vs {:?}", back, p);
        }

        #[test]
        fn accumulate_equals_matrix_chain(rel in prop::collection::vec(pose_strategy(), 0..8)) {
            let t = accumulate(&rel);
            let m = rel.iter().fold(Matrix4::identity(), |acc, r| acc * r.matrix());
            prop_assert!(mat_close(&t.last().matrix(), &m, 1e-9));
        }

        #[test]
        fn corners_stay_rigid(rel in prop::collection::vec(pose_strategy(), 1..6)) {
            let ext = PlaneExtent::new(32.0, 24.0);
            let cs = propagate_corners(&accumulate(&rel), ext);
            let base = ext.corners();
            for set in &cs {
                for i in 0..4 {
                    for j in i + 1..4 {
                        let d0 = distance(&base[i], &base[j]);
                        prop_assert!((distance(&set.points[i], &set.points[j]) - d0).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
