//! Articulated body: a shape-scaled kinematic tree posed by per-joint
//! axis-angle rotations, and weak-perspective projection to the image.
//!
//! Units: body in meters, image coordinates normalized to a frame of size 1.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Number of joints in the default humanoid tree.
pub const HUMANOID_JOINTS: usize = 13;

/// Kinematic tree. Joints are stored in topological order: every non-root
/// joint's parent has a smaller index, and joint 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct BodySpec {
    parents: Vec<usize>,
    rest_dirs: Vec<[f64; 3]>,
    rest_lengths: Vec<f64>,
}

/// Per-bone length scale, one entry per non-root joint.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams(pub Vec<f64>);

/// Per-joint axis-angle rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams(Vec<[f64; 3]>);

/// Weak-perspective camera: `image = scale·(x, y) + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joints3D(pub Vec<[f64; 3]>);

#[derive(Clone, Debug, PartialEq)]
pub struct Joints2D(pub Vec<[f64; 2]>);

impl BodySpec {
    pub fn new(parents: Vec<usize>, rest_dirs: Vec<[f64; 3]>, rest_lengths: Vec<f64>) -> Result<Self> {
        let k = parents.len();
        if k < 2 {
            return Err(Error::invalid("a body needs at least two joints"));
        }
        if parents[0] != 0 {
            return Err(Error::invalid("joint 0 must be the root (its own parent)"));
        }
        if rest_dirs.len() != k - 1 || rest_lengths.len() != k - 1 {
            return Err(Error::invalid(format!(
                "{k} joints need {} rest directions and lengths, got {} and {}",
                k - 1,
                rest_dirs.len(),
                rest_lengths.len()
            )));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p >= j {
                return Err(Error::invalid(format!(
                    "joint {j} has parent {p}; parents must precede their children"
                )));
            }
        }
        for (b, d) in rest_dirs.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("rest direction of bone {b} has norm {n}")));
            }
        }
        if let Some(b) = rest_lengths.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid(format!("rest length of bone {b} must be positive")));
        }
        Ok(Self {
            parents,
            rest_dirs,
            rest_lengths,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    /// Rest direction of the bone ending at joint `bone + 1`.
    pub fn rest_dirs(&self) -> &[[f64; 3]] {
        &self.rest_dirs
    }

    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    pub fn to_text(&self) -> String {
        let file = BodySpecFile {
            joints: self.joint_count(),
            parents: self.parents.clone(),
            rest_directions: self.rest_dirs.clone(),
            rest_lengths: self.rest_lengths.clone(),
        };
        toml::to_string(&file).expect("body spec always serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: BodySpecFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            Error::parse(line, e.message().to_string())
        })?;
        if file.joints != file.parents.len() {
            return Err(Error::invalid(format!(
                "joint count {} disagrees with {} parents",
                file.joints,
                file.parents.len()
            )));
        }
        Self::new(file.parents, file.rest_directions, file.rest_lengths)
    }
}

/// On-disk form of [`BodySpec`]:
///
/// ```text
/// joints = 3
/// parents = [0, 0, 1]
/// rest_directions = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]
/// rest_lengths = [0.5, 0.25]
/// ```
#[derive(Serialize, Deserialize)]
struct BodySpecFile {
    joints: usize,
    parents: Vec<usize>,
    rest_directions: Vec<[f64; 3]>,
    rest_lengths: Vec<f64>,
}

/// Deterministic default skeleton.
///
/// With fewer than 13 joints this is a serial chain pointing up (+y). With 13
/// or more it is a humanoid: a four-bone torso (pelvis, spine, chest, neck,
/// head), two-bone arms hanging from the chest and two-bone legs from the
/// pelvis. Joints beyond 13 extend the head chain.
pub fn default_body(joints: usize) -> Result<BodySpec> {
    if joints < 2 {
        return Err(Error::invalid(format!("need at least 2 joints, got {joints}")));
    }
    if joints < HUMANOID_JOINTS {
        let n = joints - 1;
        return BodySpec::new(
            (0..joints).map(|j| j.saturating_sub(1)).collect(),
            vec![[0.0, 1.0, 0.0]; n],
            vec![0.25; n],
        );
    }
    let up = [0.0, 1.0, 0.0];
    let down = [0.0, -1.0, 0.0];
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    // (parent, direction, length) for joints 1..13
    let mut bones: Vec<(usize, [f64; 3], f64)> = vec![
        (0, up, 0.20),                     // 1 spine
        (1, up, 0.25),                     // 2 chest
        (2, up, 0.15),                     // 3 neck
        (3, up, 0.12),                     // 4 head
        (2, unit([1.0, -0.4, 0.0]), 0.45), // 5 left elbow
        (5, unit([0.3, -1.0, 0.0]), 0.27), // 6 left wrist
        (2, unit([-1.0, -0.4, 0.0]), 0.45),
        (7, unit([-0.3, -1.0, 0.0]), 0.27),
        (0, unit([0.2, -1.0, 0.0]), 0.45), // 9 left knee
        (9, down, 0.42),                   // 10 left ankle
        (0, unit([-0.2, -1.0, 0.0]), 0.45),
        (11, down, 0.42),
    ];
    let mut tip = 4;
    for j in HUMANOID_JOINTS..joints {
        bones.push((tip, up, 0.05));
        tip = j;
    }
    let mut parents = vec![0];
    let mut dirs = Vec::with_capacity(joints - 1);
    let mut lens = Vec::with_capacity(joints - 1);
    for (p, d, l) in bones {
        parents.push(p);
        dirs.push(d);
        lens.push(l);
    }
    BodySpec::new(parents, dirs, lens)
}

impl ShapeParams {
    pub fn ones(bones: usize) -> Self {
        Self(vec![1.0; bones])
    }

    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("shape scale {i} must be positive")));
        }
        Ok(Self(scales))
    }
}

impl PoseParams {
    pub fn zeros(joints: usize) -> Self {
        Self(vec![[0.0; 3]; joints])
    }

    /// Builds a pose, rewriting any rotation with angle above π as the same
    /// rotation about the opposite axis so every magnitude lies in [0, π].
    pub fn new(rotations: Vec<[f64; 3]>) -> Result<Self> {
        let mut out = Vec::with_capacity(rotations.len());
        for (j, r) in rotations.into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("pose of joint {j} is not finite")));
            }
            out.push(wrap_rotation(r));
        }
        Ok(Self(out))
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::invalid("flat pose length must be a multiple of 3"));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn rotations(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

fn wrap_rotation(r: [f64; 3]) -> [f64; 3] {
    let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if angle <= PI {
        return r;
    }
    let turns = (angle / (2.0 * PI)).floor();
    let mut a = angle - turns * 2.0 * PI;
    let mut sign = 1.0;
    if a > PI {
        a = 2.0 * PI - a;
        sign = -1.0;
    }
    let f = sign * a / angle;
    [r[0] * f, r[1] * f, r[2] * f]
}

impl CameraParams {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("camera scale must be positive, got {scale}")));
        }
        Ok(Self { scale, tx, ty })
    }
}

impl Joints3D {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Joints2D {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

type Mat3<S> = [[S; 3]; 3];

/// Rotation matrix of an axis-angle vector (Rodrigues). Below an angle of
/// 1e-8 the series expansion in `θ²` is used so derivatives stay finite at
/// the identity.
pub fn rodrigues<S: Scalar>(r: [S; 3]) -> Mat3<S> {
    let theta_sq = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b) = if theta_sq.value() < 1e-16 {
        (S::from_f64(1.0) - theta_sq / 6.0, S::from_f64(0.5) - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (S::from_f64(1.0) - theta.cos()) / theta_sq)
    };
    let [x, y, z] = r;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let one = S::from_f64(1.0);
    [
        [one - b * (yy + zz), b * xy - a * z, b * xz + a * y],
        [b * xy + a * z, one - b * (xx + zz), b * yz - a * x],
        [b * xz - a * y, b * yz + a * x, one - b * (xx + yy)],
    ]
}

fn matmul<S: Scalar>(p: &Mat3<S>, q: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|i| std::array::from_fn(|j| p[i][0] * q[0][j] + p[i][1] * q[1][j] + p[i][2] * q[2][j]))
}

/// Forward kinematics over any scalar type. `shape` holds one scale per bone,
/// `pose` is the flattened per-joint axis-angle vector (3 per joint).
pub fn forward_kinematics_generic<S: Scalar>(spec: &BodySpec, shape: &[S], pose: &[S]) -> Vec<[S; 3]> {
    let k = spec.joint_count();
    debug_assert_eq!(shape.len(), k - 1);
    debug_assert_eq!(pose.len(), 3 * k);
    let zero = S::zero();
    let mut pos: Vec<[S; 3]> = Vec::with_capacity(k);
    let mut frames: Vec<Mat3<S>> = Vec::with_capacity(k);
    pos.push([zero; 3]);
    frames.push(rodrigues([pose[0], pose[1], pose[2]]));
    for j in 1..k {
        let p = spec.parents[j];
        let d = spec.rest_dirs[j - 1];
        let len = shape[j - 1] * spec.rest_lengths[j - 1];
        let g = &frames[p];
        let offset: [S; 3] = std::array::from_fn(|i| (g[i][0] * d[0] + g[i][1] * d[1] + g[i][2] * d[2]) * len);
        let base = pos[p];
        pos.push([base[0] + offset[0], base[1] + offset[1], base[2] + offset[2]]);
        let local = rodrigues([pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]);
        frames.push(matmul(g, &local));
    }
    pos
}

pub fn project_generic<S: Scalar>(joints: &[[S; 3]], scale: S, tx: S, ty: S) -> Vec<[S; 2]> {
    joints.iter().map(|p| [p[0] * scale + tx, p[1] * scale + ty]).collect()
}

pub fn forward_kinematics(spec: &BodySpec, shape: &ShapeParams, pose: &PoseParams) -> Result<Joints3D> {
    if shape.0.len() != spec.bone_count() {
        return Err(Error::invalid(format!(
            "shape has {} scales for {} bones",
            shape.0.len(),
            spec.bone_count()
        )));
    }
    if pose.0.len() != spec.joint_count() {
        return Err(Error::invalid(format!(
            "pose has {} rotations for {} joints",
            pose.0.len(),
            spec.joint_count()
        )));
    }
    Ok(Joints3D(forward_kinematics_generic(spec, &shape.0, &pose.flat())))
}

pub fn project(joints: &Joints3D, camera: &CameraParams) -> Joints2D {
    Joints2D(project_generic(&joints.0, camera.scale, camera.tx, camera.ty))
}
