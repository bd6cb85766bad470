//! Synthetic source domain and shifted target streams.
//!
//! A subject is a set of bone scales and a camera; a stream is one subject
//! moving under a mean-reverting pose process. Observations are the 2D
//! keypoints plus Gaussian noise, with optional dropped joints and i.i.d.
//! distractor features appended. The clean keypoints (never the noisy ones)
//! serve as 2D supervision.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, project, BodySpec, CameraParams, Joints2D, Joints3D, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::losses::PriorStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Median weak-perspective scale (focal length over depth).
    pub camera_scale: f64,
    /// Log-normal spread of the camera scale across subjects.
    pub camera_scale_spread: f64,
    /// Median bone-length multiplier.
    pub bone_scale: f64,
    /// Log-normal spread of a subject's overall bone scale.
    pub bone_scale_spread: f64,
    /// Log-normal spread of individual bones around the subject scale.
    pub bone_jitter: f64,
    /// Mean image offset of the root (camera placement).
    pub camera_offset: [f64; 2],
    pub camera_offset_spread: f64,
    /// Standard deviation of keypoint noise in the observation.
    pub noise_sigma: f64,
    /// Number of i.i.d. N(0, distractor_sigma²) features appended to `x`.
    pub distractors: usize,
    pub distractor_sigma: f64,
    /// Per-joint per-frame probability of being dropped from `x`.
    pub occlusion_prob: f64,
    /// Pull of the pose process toward the mean pose per frame, in (0, 1].
    pub pose_reversion: f64,
    /// Standard deviation of the per-frame pose increment (radians).
    pub pose_step: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            camera_scale: 0.6,
            camera_scale_spread: 0.05,
            bone_scale: 1.0,
            bone_scale_spread: 0.04,
            bone_jitter: 0.02,
            camera_offset: [0.0, 0.0],
            camera_offset_spread: 0.03,
            noise_sigma: 0.005,
            distractors: 16,
            distractor_sigma: 1.0,
            occlusion_prob: 0.0,
            pose_reversion: 0.1,
            pose_step: 0.05,
        }
    }
}

impl DomainConfig {
    /// The default target domain: camera scale ×1.7, bones ×0.95 and the
    /// subject placed off-center.
    pub fn shifted() -> Self {
        let src = Self::default();
        Self {
            camera_scale: src.camera_scale * 1.7,
            bone_scale: src.bone_scale * 0.95,
            camera_offset: [0.12, -0.08],
            ..src
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("camera_scale", self.camera_scale), ("bone_scale", self.bone_scale)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("camera_scale_spread", self.camera_scale_spread),
            ("bone_scale_spread", self.bone_scale_spread),
            ("bone_jitter", self.bone_jitter),
            ("camera_offset_spread", self.camera_offset_spread),
            ("noise_sigma", self.noise_sigma),
            ("distractor_sigma", self.distractor_sigma),
            ("pose_step", self.pose_step),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::invalid("occlusion_prob must lie in [0, 1]"));
        }
        if !(self.pose_reversion > 0.0 && self.pose_reversion <= 1.0) {
            return Err(Error::invalid("pose_reversion must lie in (0, 1]"));
        }
        if self.camera_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera_offset must be finite"));
        }
        Ok(())
    }

    pub fn observation_dim(&self, body: &BodySpec) -> usize {
        2 * body.joint_count() + self.distractors
    }

    /// Standard deviation of the stationary pose distribution.
    pub fn pose_spread(&self) -> f64 {
        let k = self.pose_reversion;
        self.pose_step / (k * (2.0 - k)).sqrt()
    }
}

/// Hidden ground truth of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub shape: ShapeParams,
    pub pose: PoseParams,
    pub camera: CameraParams,
    pub joints3d: Joints3D,
    pub joints2d: Joints2D,
}

impl GroundTruth {
    pub fn new(body: &BodySpec, shape: ShapeParams, pose: PoseParams, camera: CameraParams) -> Result<Self> {
        let joints3d = forward_kinematics(body, &shape, &pose)?;
        let joints2d = project(&joints3d, &camera);
        Ok(Self {
            shape,
            pose,
            camera,
            joints3d,
            joints2d,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    /// Joints whose coordinates were zeroed in `x`.
    pub occluded: Vec<bool>,
}

/// One frame of a target stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub frame: usize,
    pub x: Vec<f64>,
    pub occluded: Vec<bool>,
    /// Clean 2D keypoints, available to adaptation.
    pub keypoints: Joints2D,
    /// Hidden truth, for evaluation only.
    pub truth: GroundTruth,
}

/// One labeled source example.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSample {
    pub x: Vec<f64>,
    pub occluded: Vec<bool>,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceDataset {
    pub samples: Vec<SourceSample>,
    pub priors: PriorStats,
}

/// Mean pose of the motion process: slightly bent elbows and knees on the
/// humanoid, rest pose otherwise.
pub fn mean_pose(body: &BodySpec) -> Vec<f64> {
    let mut m = vec![0.0; 3 * body.joint_count()];
    if body.joint_count() >= crate::body::HUMANOID_JOINTS {
        m[3 * 5 + 2] = 0.35;
        m[3 * 7 + 2] = -0.35;
        m[3 * 9] = 0.25;
        m[3 * 11] = 0.25;
    }
    m
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn clamp_angle(v: f64) -> f64 {
    v.clamp(-std::f64::consts::PI, std::f64::consts::PI)
}

fn draw_shape<R: Rng>(cfg: &DomainConfig, body: &BodySpec, rng: &mut R) -> ShapeParams {
    let subject = cfg.bone_scale * (cfg.bone_scale_spread * normal(rng)).exp();
    ShapeParams(
        (0..body.bone_count())
            .map(|_| subject * (cfg.bone_jitter * normal(rng)).exp())
            .collect(),
    )
}

fn draw_camera<R: Rng>(cfg: &DomainConfig, rng: &mut R) -> CameraParams {
    let scale = cfg.camera_scale * (cfg.camera_scale_spread * normal(rng)).exp();
    let tx = cfg.camera_offset[0] + cfg.camera_offset_spread * normal(rng);
    let ty = cfg.camera_offset[1] + cfg.camera_offset_spread * normal(rng);
    CameraParams { scale, tx, ty }
}

fn draw_stationary_pose<R: Rng>(cfg: &DomainConfig, mean: &[f64], rng: &mut R) -> Vec<f64> {
    let spread = cfg.pose_spread();
    mean.iter().map(|m| clamp_angle(m + spread * normal(rng))).collect()
}

/// One mean-reverting step: `θ ← θ + κ(μ − θ) + step·ε`, clamped to [−π, π].
fn step_pose<R: Rng>(cfg: &DomainConfig, mean: &[f64], pose: &mut [f64], rng: &mut R) {
    for (p, m) in pose.iter_mut().zip(mean) {
        *p = clamp_angle(*p + cfg.pose_reversion * (m - *p) + cfg.pose_step * normal(rng));
    }
}

/// Subject parameters and a pose sequence of length `n`: shape and camera
/// are drawn once, the pose starts from the stationary distribution.
pub fn sample_trajectory(
    cfg: &DomainConfig,
    body: &BodySpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(ShapeParams, PoseParams, CameraParams)>> {
    if n == 0 {
        return Err(Error::invalid("trajectory length must be at least 1"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trajectory_with(cfg, body, n, &mut rng)
}

fn trajectory_with<R: Rng>(
    cfg: &DomainConfig,
    body: &BodySpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(ShapeParams, PoseParams, CameraParams)>> {
    let shape = draw_shape(cfg, body, rng);
    let camera = draw_camera(cfg, rng);
    let mean = mean_pose(body);
    let mut pose = draw_stationary_pose(cfg, &mean, rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            step_pose(cfg, &mean, &mut pose, rng);
        }
        out.push((shape.clone(), PoseParams::from_flat(&pose)?, camera));
    }
    Ok(out)
}

fn observe_with<R: Rng>(keypoints: &Joints2D, cfg: &DomainConfig, rng: &mut R) -> Observation {
    let k = keypoints.len();
    let mut x = Vec::with_capacity(2 * k + cfg.distractors);
    let mut occluded = Vec::with_capacity(k);
    for p in &keypoints.0 {
        let hidden = cfg.occlusion_prob > 0.0 && rng.random::<f64>() < cfg.occlusion_prob;
        let nx = cfg.noise_sigma * normal(rng);
        let ny = cfg.noise_sigma * normal(rng);
        if hidden {
            x.extend([0.0, 0.0]);
        } else {
            x.extend([p[0] + nx, p[1] + ny]);
        }
        occluded.push(hidden);
    }
    x.extend((0..cfg.distractors).map(|_| cfg.distractor_sigma * normal(rng)));
    Observation { x, occluded }
}

/// Observation vector of a frame: noisy flattened keypoints followed by
/// distractor features.
pub fn observe(truth: &GroundTruth, cfg: &DomainConfig, seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    observe_with(&truth.joints2d, cfg, &mut rng)
}

/// `n` i.i.d. labeled frames and the prior statistics of their `(β, θ)`.
pub fn make_source_dataset(cfg: &DomainConfig, body: &BodySpec, n: usize, seed: u64) -> Result<SourceDataset> {
    if n == 0 {
        return Err(Error::invalid("source dataset needs at least one sample"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = mean_pose(body);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = draw_shape(cfg, body, &mut rng);
        let camera = draw_camera(cfg, &mut rng);
        let pose = PoseParams::from_flat(&draw_stationary_pose(cfg, &mean, &mut rng))?;
        let truth = GroundTruth::new(body, shape, pose, camera)?;
        let obs = observe_with(&truth.joints2d, cfg, &mut rng);
        samples.push(SourceSample {
            x: obs.x,
            occluded: obs.occluded,
            truth,
        });
    }
    let flat_poses: Vec<Vec<f64>> = samples.iter().map(|s| s.truth.pose.flat()).collect();
    let priors = PriorStats::estimate(
        samples
            .iter()
            .zip(&flat_poses)
            .map(|(s, p)| (s.truth.shape.0.as_slice(), p.as_slice())),
    )?;
    Ok(SourceDataset { samples, priors })
}

/// Mid-stream change of domain: from frame `at` on, the camera is redrawn
/// from `config` and observations use its noise and occlusion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamShift {
    pub at: usize,
    pub config: DomainConfig,
}

pub fn make_target_stream(
    cfg: &DomainConfig,
    body: &BodySpec,
    n: usize,
    seed: u64,
    shift: Option<&StreamShift>,
) -> Result<Vec<StreamSample>> {
    if n == 0 {
        return Err(Error::invalid("stream length must be at least 1"));
    }
    cfg.validate()?;
    if let Some(s) = shift {
        s.config.validate()?;
        if s.config.distractors != cfg.distractors {
            return Err(Error::invalid(
                "a mid-stream shift cannot change the observation dimension",
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = trajectory_with(cfg, body, n, &mut rng)?;
    let mut shifted_camera = None;
    let mut out = Vec::with_capacity(n);
    for (i, (shape, pose, camera)) in traj.into_iter().enumerate() {
        let (active, camera) = match shift {
            Some(s) if i >= s.at => {
                let cam = *shifted_camera.get_or_insert_with(|| draw_camera(&s.config, &mut rng));
                (&s.config, cam)
            }
            _ => (cfg, camera),
        };
        let truth = GroundTruth::new(body, shape, pose, camera)?;
        let obs = observe_with(&truth.joints2d, active, &mut rng);
        out.push(StreamSample {
            frame: i,
            x: obs.x,
            occluded: obs.occluded,
            keypoints: truth.joints2d.clone(),
            truth,
        });
    }
    Ok(out)
}

// Columnar text format: a header line naming every column, then one frame per
// line. Floats use Rust's shortest round-trip representation.
//
//   frame, x_0..x_{D-1}, kp_{k}_{u,v}, j3_{k}_{x,y,z}, beta_{b}, theta_{k}_{x,y,z},
//   cam_s, cam_tx, cam_ty, occ_{k}

fn columns(body: &BodySpec, dim: usize) -> Vec<String> {
    let k = body.joint_count();
    let mut c = vec!["frame".to_string()];
    c.extend((0..dim).map(|i| format!("x_{i}")));
    for j in 0..k {
        c.extend(["u", "v"].iter().map(|a| format!("kp_{j}_{a}")));
    }
    for j in 0..k {
        c.extend(["x", "y", "z"].iter().map(|a| format!("j3_{j}_{a}")));
    }
    c.extend((0..k - 1).map(|b| format!("beta_{b}")));
    for j in 0..k {
        c.extend(["x", "y", "z"].iter().map(|a| format!("theta_{j}_{a}")));
    }
    c.extend(["cam_s", "cam_tx", "cam_ty"].iter().map(|s| s.to_string()));
    c.extend((0..k).map(|j| format!("occ_{j}")));
    c
}

fn push_row(out: &mut String, frame: usize, x: &[f64], occluded: &[bool], t: &GroundTruth) {
    let _ = write!(out, "{frame}");
    let cam = [t.camera.scale, t.camera.tx, t.camera.ty];
    let floats = x
        .iter()
        .chain(t.joints2d.0.iter().flatten())
        .chain(t.joints3d.0.iter().flatten())
        .chain(&t.shape.0)
        .chain(t.pose.rotations().iter().flatten())
        .chain(&cam);
    for v in floats {
        let _ = write!(out, ",{v:?}");
    }
    for o in occluded {
        let _ = write!(out, ",{}", u8::from(*o));
    }
    out.push('\n');
}

pub fn stream_to_text(body: &BodySpec, stream: &[StreamSample]) -> String {
    let dim = stream.first().map_or(2 * body.joint_count(), |s| s.x.len());
    let mut out = columns(body, dim).join(",");
    out.push('\n');
    for s in stream {
        push_row(&mut out, s.frame, &s.x, &s.occluded, &s.truth);
    }
    out
}

pub fn source_to_text(body: &BodySpec, samples: &[SourceSample]) -> String {
    let dim = samples.first().map_or(2 * body.joint_count(), |s| s.x.len());
    let mut out = columns(body, dim).join(",");
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        push_row(&mut out, i, &s.x, &s.occluded, &s.truth);
    }
    out
}

struct Row {
    frame: usize,
    x: Vec<f64>,
    occluded: Vec<bool>,
    truth: GroundTruth,
}

fn parse_rows(body: &BodySpec, text: &str) -> Result<Vec<Row>> {
    let k = body.joint_count();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let ncols = header.split(',').count();
    let fixed = 1 + 2 * k + 3 * k + (k - 1) + 3 * k + 3 + k;
    if ncols < fixed {
        return Err(Error::parse(
            1,
            format!("expected at least {fixed} columns, found {ncols}"),
        ));
    }
    let dim = ncols - fixed;
    if header.split(',').map(str::to_string).ne(columns(body, dim)) {
        return Err(Error::parse(1, "header does not match the body"));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(Error::parse(
                lineno,
                format!("expected {ncols} fields, found {}", fields.len()),
            ));
        }
        let frame = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::parse(lineno, format!("frame: {e}")))?;
        let nums = fields[1..ncols - k]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::parse(lineno, format!("{f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let occluded = fields[ncols - k..]
            .iter()
            .map(|f| match *f {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::parse(lineno, format!("occlusion flag {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let mut it = nums.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f64>>();
        let x = take(dim);
        let kp = take(2 * k);
        let j3 = take(3 * k);
        let beta = take(k - 1);
        let theta = take(3 * k);
        let cam = take(3);
        let bad = |e: Error| Error::parse(lineno, e.to_string());
        let truth = GroundTruth {
            shape: ShapeParams::new(beta).map_err(bad)?,
            pose: PoseParams::from_flat(&theta).map_err(bad)?,
            camera: CameraParams::new(cam[0], cam[1], cam[2]).map_err(bad)?,
            joints3d: Joints3D(j3.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()),
            joints2d: Joints2D(kp.chunks_exact(2).map(|c| [c[0], c[1]]).collect()),
        };
        rows.push(Row {
            frame,
            x,
            occluded,
            truth,
        });
    }
    Ok(rows)
}

pub fn stream_from_text(body: &BodySpec, text: &str) -> Result<Vec<StreamSample>> {
    Ok(parse_rows(body, text)?
        .into_iter()
        .map(|r| StreamSample {
            frame: r.frame,
            x: r.x,
            occluded: r.occluded,
            keypoints: r.truth.joints2d.clone(),
            truth: r.truth,
        })
        .collect())
}

pub fn source_from_text(body: &BodySpec, text: &str) -> Result<Vec<SourceSample>> {
    Ok(parse_rows(body, text)?
        .into_iter()
        .map(|r| SourceSample {
            x: r.x,
            occluded: r.occluded,
            truth: r.truth,
        })
        .collect())
}
