//! Synthetic freehand sweeps through a procedural speckle volume.
//!
//! Frames are planar slices of a static 3-D value-noise field, sampled along a
//! known trajectory. Intensity perturbations (brightness, lost contact) never
//! touch the ground truth; speed bursts change the ground truth and the frames
//! together.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{self, accumulate, PlaneExtent, Pose6DoF, PoseError, Trajectory};
use crate::tensor::RngKey;

pub const PIXEL_SPACING_MM: f64 = 0.5;

const OCTAVES: [(f64, f64); 3] = [(4.0, 1.0), (2.0, 0.5), (1.0, 0.25)];
const CONTRAST: f64 = 2.5;
const FRAMES_MAGIC: &[u8; 4] = b"FHFR";
const FRAMES_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid sweep spec: {0}")]
    InvalidSpec(String),
    #[error("segment {start}..{end} out of range for {frames} frames")]
    Segment { start: usize, end: usize, frames: usize },
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f32>,
    pub timestamp: f64,
}

impl Frame {
    pub fn new(width: usize, height: usize, intensities: Vec<f32>, timestamp: f64) -> Self {
        assert_eq!(intensities.len(), width * height, "frame buffer size");
        Self {
            width,
            height,
            intensities,
            timestamp,
        }
    }

    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.intensities[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.intensities.iter().map(|&v| v as f64).sum::<f64>() / self.intensities.len() as f64
    }

    pub fn extent(&self) -> PlaneExtent {
        PlaneExtent::new(
            self.width as f64 * PIXEL_SPACING_MM,
            self.height as f64 * PIXEL_SPACING_MM,
        )
    }

    /// Pixel centre in the frame's local plane, origin at the image centre.
    pub fn pixel_to_plane(&self, col: f64, row: f64) -> [f64; 3] {
        [
            (col + 0.5 - self.width as f64 / 2.0) * PIXEL_SPACING_MM,
            (row + 0.5 - self.height as f64 / 2.0) * PIXEL_SPACING_MM,
            0.0,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum MotionModel {
    Linear,
    /// Direction reverses at every listed frame index.
    BackAndForth { turns: Vec<usize> },
    /// Constant tilt about the in-plane x axis on top of the translation.
    Arc { degrees_per_frame: f64 },
}

/// Scales the motion arriving at frames `start..end` by `multiplier`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedBurst {
    pub start: usize,
    pub end: usize,
    pub multiplier: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum IntensityPerturbation {
    /// Multiplies frames `start..end` by `gain` (0 < gain <= 4).
    Brightness { start: usize, end: usize, gain: f64 },
    /// Poor acoustic contact: frames `start..end` keep only `factor` of their signal (0 <= factor < 1).
    Contact { start: usize, end: usize, factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    SpeedBurst(SpeedBurst),
    Intensity(IntensityPerturbation),
}

fn default_direction() -> [f64; 3] {
    [0.3, 0.2, 1.0]
}

fn default_rate() -> f64 {
    20.0
}

fn default_period() -> f64 {
    24.0
}

fn default_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub motion: MotionModel,
    /// Translation per frame in millimetres.
    pub speed_mm: f64,
    /// Direction of travel in the probe frame; normalised before use.
    #[serde(default = "default_direction")]
    pub direction: [f64; 3],
    #[serde(default)]
    pub bursts: Vec<SpeedBurst>,
    /// Relative amplitude of the sinusoidal per-frame gain.
    #[serde(default)]
    pub drift_amplitude: f64,
    #[serde(default = "default_period")]
    pub drift_period_frames: f64,
    /// Standard deviation of additive Gaussian noise.
    #[serde(default)]
    pub noise_std: f64,
    pub frames: usize,
    pub seed: u64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_rate")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub perturbations: Vec<IntensityPerturbation>,
}

impl SweepSpec {
    pub fn linear(frames: usize, speed_mm: f64, seed: u64) -> Self {
        Self {
            motion: MotionModel::Linear,
            speed_mm,
            direction: default_direction(),
            bursts: Vec::new(),
            drift_amplitude: 0.0,
            drift_period_frames: default_period(),
            noise_std: 0.0,
            frames,
            seed,
            width: default_size(),
            height: default_size(),
            frame_rate_hz: default_rate(),
            perturbations: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.frames < 2 {
            return bad("at least two frames are required");
        }
        if self.width < 8 || self.height < 8 {
            return bad("frames must be at least 8x8");
        }
        if !(self.speed_mm.is_finite() && self.speed_mm >= 0.0) {
            return bad("speed must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.drift_amplitude) {
            return bad("drift amplitude must lie in [0, 1)");
        }
        if !(self.drift_period_frames > 0.0) {
            return bad("drift period must be positive");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise level must be non-negative");
        }
        if !(self.frame_rate_hz > 0.0) {
            return bad("frame rate must be positive");
        }
        if self.direction.iter().all(|v| *v == 0.0) || !self.direction.iter().all(|v| v.is_finite()) {
            return bad("direction must be a finite non-zero vector");
        }
        if let MotionModel::Arc { degrees_per_frame } = self.motion {
            if !degrees_per_frame.is_finite() || degrees_per_frame.abs() >= 45.0 {
                return bad("arc rate must be finite and below 45 degrees per frame");
            }
        }
        for b in &self.bursts {
            self.check_segment(b.start, b.end)?;
            if !(b.multiplier > 0.0 && b.multiplier <= 10.0) {
                return bad("burst multiplier must lie in (0, 10]");
            }
        }
        for p in &self.perturbations {
            match *p {
                IntensityPerturbation::Brightness { start, end, gain } => {
                    self.check_segment(start, end)?;
                    if !(gain > 0.0 && gain <= 4.0) {
                        return bad("brightness gain must lie in (0, 4]");
                    }
                }
                IntensityPerturbation::Contact { start, end, factor } => {
                    self.check_segment(start, end)?;
                    if !(0.0..1.0).contains(&factor) {
                        return bad("contact factor must lie in [0, 1)");
                    }
                }
            }
        }
        Ok(())
    }

    fn check_segment(&self, start: usize, end: usize) -> Result<()> {
        if start >= end || end > self.frames {
            return Err(SynthError::Segment {
                start,
                end,
                frames: self.frames,
            });
        }
        Ok(())
    }

    fn unit_direction(&self) -> [f64; 3] {
        let n = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.direction.map(|v| v / n)
    }

    /// Ground-truth relative pose arriving at frame `m` (m >= 1). Defined
    /// for any `m`, including past the last frame.
    pub fn relative_motion(&self, m: usize) -> Pose6DoF {
        let d = self.unit_direction();
        let mut sign = 1.0;
        let mut rot = [0.0; 3];
        match &self.motion {
            MotionModel::Linear => {}
            MotionModel::BackAndForth { turns } => {
                if turns.iter().filter(|&&t| t < m).count() % 2 == 1 {
                    sign = -1.0;
                }
            }
            MotionModel::Arc { degrees_per_frame } => rot[0] = *degrees_per_frame,
        }
        let mult: f64 = self
            .bursts
            .iter()
            .filter(|b| b.start <= m && m < b.end)
            .map(|b| b.multiplier)
            .product();
        let s = sign * self.speed_mm * mult;
        Pose6DoF::new(d.map(|v| v * s), rot.map(|v| v * mult))
    }
}

/// A varied family of sweeps for training and evaluation: speeds in
/// 0.3..0.8 mm/frame, cycling through linear, back-and-forth and arc motion,
/// with mild noise and gain drift.
pub fn sweep_family(count: usize, frames: usize, seed: u64) -> Vec<SweepSpec> {
    let key = RngKey::new(seed).child("family", 0);
    (0..count)
        .map(|i| {
            let mut rng = key.child("sweep", i as u64).rng();
            let motion = match i % 3 {
                0 => MotionModel::Linear,
                1 => MotionModel::BackAndForth {
                    turns: vec![rng.random_range(frames / 3..=2 * frames / 3)],
                },
                _ => MotionModel::Arc {
                    degrees_per_frame: rng.random_range(-0.3..0.3),
                },
            };
            SweepSpec {
                motion,
                speed_mm: rng.random_range(0.3..0.8),
                direction: [rng.random_range(0.1..0.5), rng.random_range(0.0..0.3), 1.0],
                drift_amplitude: 0.1,
                noise_std: 0.02,
                ..SweepSpec::linear(frames, 0.5, rng.random())
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSequence {
    pub frames: Vec<Frame>,
    pub gt_relatives: Vec<Pose6DoF>,
    pub spec: SweepSpec,
}

impl SweepSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn trajectory(&self) -> Trajectory {
        accumulate(&self.gt_relatives)
    }

    pub fn extent(&self) -> PlaneExtent {
        self.frames[0].extent()
    }
}

fn hash3(seed: u64, octave: u64, i: i64, j: i64, k: i64) -> f64 {
    let mut h = seed ^ octave.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [i, j, k] {
        h ^= (v as u64).wrapping_add(0x632B_E59B_D9B4_E019);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// The phantom's intensity at a world point (mm), in [0, 1].
pub fn sample_volume(seed: u64, p: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    let mut total = 0.0;
    for (o, &(cell, amp)) in OCTAVES.iter().enumerate() {
        let q = p.map(|v| v / cell);
        let base = q.map(f64::floor);
        let f = [0, 1, 2].map(|a| smoothstep(q[a] - base[a]));
        let b = base.map(|v| v as i64);
        let mut v = 0.0;
        for corner in 0..8 {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = (if di == 1 { f[0] } else { 1.0 - f[0] })
                * (if dj == 1 { f[1] } else { 1.0 - f[1] })
                * (if dk == 1 { f[2] } else { 1.0 - f[2] });
            v += w * hash3(seed, o as u64, b[0] + di, b[1] + dj, b[2] + dk);
        }
        acc += amp * v;
        total += amp;
    }
    (0.5 + CONTRAST * (acc / total - 0.5)).clamp(0.0, 1.0)
}

/// Slices the phantom at `pose`; no gain or noise.
pub fn render_slice(seed: u64, width: usize, height: usize, pose: &Pose6DoF) -> Vec<f32> {
    let probe = Frame::new(width, height, vec![0.0; width * height], 0.0);
    let mut out = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let p = pose.apply(probe.pixel_to_plane(c as f64, r as f64));
            out.push(sample_volume(seed, p) as f32);
        }
    }
    out
}

fn apply_intensity(frames: &mut [Frame], p: &IntensityPerturbation) {
    let (start, end, factor) = match *p {
        IntensityPerturbation::Brightness { start, end, gain } => (start, end, gain),
        IntensityPerturbation::Contact { start, end, factor } => (start, end, factor),
    };
    for f in &mut frames[start..end] {
        for v in &mut f.intensities {
            *v = (*v as f64 * factor).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Frame `m` of a sweep seen from `pose`, with the sweep's gain drift and
/// noise but without intensity perturbations.
pub fn render_frame(spec: &SweepSpec, m: usize, pose: &Pose6DoF) -> Frame {
    let mut px = render_slice(spec.seed, spec.width, spec.height, pose);
    let phase = 2.0 * std::f64::consts::PI * m as f64 / spec.drift_period_frames;
    let gain = 1.0 + spec.drift_amplitude * phase.sin();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite noise level");
    let mut rng = RngKey::new(spec.seed).child("noise", 0).child("frame", m as u64).rng();
    for v in &mut px {
        let mut x = *v as f64 * gain;
        if spec.noise_std > 0.0 {
            x += noise.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    Frame::new(spec.width, spec.height, px, m as f64 / spec.frame_rate_hz)
}

pub fn generate(spec: &SweepSpec) -> Result<SweepSequence> {
    spec.validate()?;
    let gt_relatives: Vec<Pose6DoF> = (1..spec.frames).map(|m| spec.relative_motion(m)).collect();
    let traj = accumulate(&gt_relatives);
    let mut frames: Vec<Frame> = traj.poses().iter().enumerate().map(|(m, pose)| render_frame(spec, m, pose)).collect();
    for p in &spec.perturbations {
        apply_intensity(&mut frames, p);
    }
    Ok(SweepSequence {
        frames,
        gt_relatives,
        spec: spec.clone(),
    })
}

/// Returns a new sequence with `kind` applied; earlier perturbations are kept.
pub fn perturb(seq: &SweepSequence, kind: Perturbation) -> Result<SweepSequence> {
    let mut spec = seq.spec.clone();
    match kind {
        Perturbation::SpeedBurst(b) => {
            spec.check_segment(b.start, b.end)?;
            spec.bursts.push(b);
            generate(&spec)
        }
        Perturbation::Intensity(p) => {
            spec.perturbations.push(p);
            spec.validate()?;
            let mut frames = seq.frames.clone();
            apply_intensity(&mut frames, &p);
            Ok(SweepSequence {
                frames,
                gt_relatives: seq.gt_relatives.clone(),
                spec,
            })
        }
    }
}

pub fn write_frames<W: Write>(mut w: W, frames: &[Frame]) -> io::Result<()> {
    let (width, height) = frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
    w.write_all(FRAMES_MAGIC)?;
    for v in [FRAMES_VERSION, width as u32, height as u32, frames.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for f in frames {
        if (f.width, f.height) != (width, height) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "mixed frame sizes"));
        }
        w.write_all(&f.timestamp.to_le_bytes())?;
        for &v in &f.intensities {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_frames<R: Read>(mut r: R) -> io::Result<Vec<Frame>> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FRAMES_MAGIC {
        return Err(bad("not a frame container"));
    }
    let mut hdr = [0u32; 4];
    for h in &mut hdr {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *h = u32::from_le_bytes(b);
    }
    let [version, width, height, count] = hdr.map(|v| v as usize);
    if version != FRAMES_VERSION as usize {
        return Err(bad("unsupported frame container version"));
    }
    let mut frames = Vec::with_capacity(count.min(10_000));
    let mut buf = vec![0u8; width * height * 4];
    for _ in 0..count {
        let mut ts = [0u8; 8];
        r.read_exact(&mut ts)?;
        r.read_exact(&mut buf)?;
        let px = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        frames.push(Frame::new(width, height, px, f64::from_le_bytes(ts)));
    }
    Ok(frames)
}

/// Writes `frames.bin`, `gt.txt` and `spec.json` into `dir`.
pub fn save_sequence(seq: &SweepSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_frames(io::BufWriter::new(fs::File::create(dir.join("frames.bin"))?), &seq.frames)?;
    pose::write_trajectory(&dir.join("gt.txt"), &seq.trajectory(), Some("tx ty tz rx ry rz"))?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&seq.spec)?)?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<SweepSequence> {
    let frames = read_frames(io::BufReader::new(fs::File::open(dir.join("frames.bin"))?))?;
    let traj = pose::read_trajectory(&dir.join("gt.txt"))?;
    let spec: SweepSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    if traj.len() != frames.len() {
        return Err(SynthError::InvalidSpec(format!(
            "{} frames but {} poses",
            frames.len(),
            traj.len()
        )));
    }
    Ok(SweepSequence {
        frames,
        gt_relatives: traj.relatives(),
        spec,
    })
}
