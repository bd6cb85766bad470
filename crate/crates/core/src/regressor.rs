//! The student regressor: a small tanh MLP mapping an observation vector to
//! raw body/camera parameters, plus its exponential-moving-average teacher.
//!
//! Raw output layout, for `K` joints:
//!
//! | range            | meaning                         |
//! |------------------|---------------------------------|
//! | `0 .. 3K`        | per-joint axis-angle pose       |
//! | `3K .. 4K-1`     | log bone-length scales          |
//! | `4K-1`           | log camera scale                |
//! | `4K, 4K+1`       | camera translation `tx, ty`     |

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamVector, Scalar};
use crate::body::{
    forward_kinematics_generic, project_generic, BodySpec, CameraParams, Joints2D, Joints3D, PoseParams, ShapeParams,
};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"BLVLMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegressorSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub joints: usize,
}

impl RegressorSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, joints: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("regressor input dimension must be positive"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if joints < 2 {
            return Err(Error::invalid("regressor needs at least two joints"));
        }
        Ok(Self {
            input_dim,
            hidden,
            joints,
        })
    }

    pub fn output_dim(&self) -> usize {
        output_dim(self.joints)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.output_dim())) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn check_body(&self, body: &BodySpec) -> Result<()> {
        if body.joint_count() != self.joints {
            return Err(Error::invalid(format!(
                "regressor built for {} joints, body has {}",
                self.joints,
                body.joint_count()
            )));
        }
        Ok(())
    }
}

pub const fn output_dim(joints: usize) -> usize {
    3 * joints + (joints - 1) + 3
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    spec: RegressorSpec,
    params: ParamVector,
}

/// EMA copy of the student weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherWeights(ModelWeights);

impl ModelWeights {
    pub fn new(spec: RegressorSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: RegressorSpec) -> Self {
        let params = ParamVector::zeros(spec.param_count());
        Self { spec, params }
    }

    pub fn spec(&self) -> &RegressorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.spec.clone(), params)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.spec.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.spec.joints as u32).to_le_bytes())?;
        w.write_all(&(self.spec.hidden.len() as u32).to_le_bytes())?;
        for &h in &self.spec.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in self.params.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary checkpoint format:
    ///
    /// ```text
    /// magic      8 bytes  "BLVLMLP\0"
    /// version    u32 LE   (currently 1)
    /// input_dim  u32 LE
    /// joints     u32 LE
    /// layers     u32 LE   number of hidden layers
    /// widths     u32 LE × layers
    /// count      u64 LE   number of parameters
    /// params     f64 LE × count
    /// ```
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not a regressor checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let input_dim = read_u32(&mut r)? as usize;
        let joints = read_u32(&mut r)? as usize;
        let layers = read_u32(&mut r)? as usize;
        let hidden = (0..layers)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = RegressorSpec::new(input_dim, hidden, joints)?;
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let count = u64::from_le_bytes(buf) as usize;
        if count != spec.param_count() {
            return Err(Error::invalid(format!(
                "checkpoint holds {count} parameters, spec needs {}",
                spec.param_count()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        Self::new(spec, ParamVector(params))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl TeacherWeights {
    /// Teacher initialized to the student, `ω₀ = φ₀`.
    pub fn from_student(student: &ModelWeights) -> Self {
        Self(student.clone())
    }

    pub fn as_model(&self) -> &ModelWeights {
        &self.0
    }

    pub fn params(&self) -> &ParamVector {
        &self.0.params
    }
}

/// `ω ← δ·ω + (1 − δ)·φ`.
pub fn teacher_update(teacher: &TeacherWeights, student: &ModelWeights, delta: f64) -> Result<TeacherWeights> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {delta}")));
    }
    if teacher.0.spec != student.spec {
        return Err(Error::invalid("teacher and student have different architectures"));
    }
    let keep = 1.0 - delta;
    let params = teacher
        .params()
        .iter()
        .zip(student.params.iter())
        .map(|(w, p)| delta * w + keep * p)
        .collect();
    Ok(TeacherWeights(ModelWeights {
        spec: student.spec.clone(),
        params: ParamVector(params),
    }))
}

/// Fan-in scaled Gaussian initialization (`std = 1/√fan_in`), zero biases.
pub fn init_weights(spec: &RegressorSpec, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelWeights {
        spec: spec.clone(),
        params: ParamVector(params),
    }
}

/// Raw network output for weights `phi` (any scalar type) on observation `x`.
pub fn forward_raw<S: Scalar>(spec: &RegressorSpec, phi: &[S], x: &[f64]) -> Vec<S> {
    debug_assert_eq!(phi.len(), spec.param_count());
    debug_assert_eq!(x.len(), spec.input_dim);
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut h: Vec<S> = x.iter().map(|v| S::from_f64(*v)).collect();
    let mut offset = 0;
    for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let weights = &phi[offset..offset + fan_in * fan_out];
        let biases = &phi[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;
        h = (0..fan_out)
            .map(|o| {
                let z = S::affine(biases[o], &weights[o * fan_in..(o + 1) * fan_in], &h);
                if l == last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
    }
    h
}

/// Body and camera parameters decoded from a raw output vector, still in the
/// scalar type of the computation.
pub struct Decoded<'a, S> {
    pub pose: &'a [S],
    pub log_shape: &'a [S],
    pub shape: Vec<S>,
    pub scale: S,
    pub tx: S,
    pub ty: S,
}

pub fn decode<S: Scalar>(raw: &[S], joints: usize) -> Decoded<'_, S> {
    let k = joints;
    let log_shape = &raw[3 * k..4 * k - 1];
    Decoded {
        pose: &raw[..3 * k],
        log_shape,
        shape: log_shape.iter().map(|v| v.exp()).collect(),
        scale: raw[4 * k - 1].exp(),
        tx: raw[4 * k],
        ty: raw[4 * k + 1],
    }
}

impl<S: Scalar> Decoded<'_, S> {
    pub fn joints3d(&self, body: &BodySpec) -> Vec<[S; 3]> {
        forward_kinematics_generic(body, &self.shape, self.pose)
    }

    pub fn joints2d(&self, body: &BodySpec) -> Vec<[S; 2]> {
        project_generic(&self.joints3d(body), self.scale, self.tx, self.ty)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub shape: ShapeParams,
    pub pose: PoseParams,
    pub camera: CameraParams,
    pub raw: Vec<f64>,
}

impl Prediction {
    pub fn from_raw(raw: Vec<f64>, joints: usize) -> Result<Self> {
        if raw.len() != output_dim(joints) {
            return Err(Error::invalid(format!(
                "raw output has {} entries, expected {}",
                raw.len(),
                output_dim(joints)
            )));
        }
        let d = decode(&raw, joints);
        let shape =
            ShapeParams::new(d.shape.clone()).map_err(|_| Error::numerical("prediction", "shape scale overflowed"))?;
        let pose = PoseParams::from_flat(d.pose).map_err(|_| Error::numerical("prediction", "pose is not finite"))?;
        let camera = CameraParams::new(d.scale, d.tx, d.ty)
            .map_err(|_| Error::numerical("prediction", "camera scale overflowed"))?;
        Ok(Self {
            shape,
            pose,
            camera,
            raw,
        })
    }

    /// 3D joints from the raw pose (identical rotations to the wrapped pose).
    pub fn joints3d(&self, body: &BodySpec) -> Joints3D {
        Joints3D(forward_kinematics_generic(
            body,
            &self.shape.0,
            &self.raw[..3 * body.joint_count()],
        ))
    }

    pub fn joints2d(&self, body: &BodySpec) -> Joints2D {
        crate::body::project(&self.joints3d(body), &self.camera)
    }
}

pub fn predict(weights: &ModelWeights, x: &[f64]) -> Result<Prediction> {
    if x.len() != weights.spec.input_dim {
        return Err(Error::invalid(format!(
            "observation has {} features, model expects {}",
            x.len(),
            weights.spec.input_dim
        )));
    }
    let raw = forward_raw(&weights.spec, &weights.params, x);
    Prediction::from_raw(raw, weights.spec.joints)
}
