//! Frame and temporal loss terms.
//!
//! Every term is written once, generically over [`Scalar`], so the same code
//! yields loss values, gradients and Hessian-vector products.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Objective, Scalar};
use crate::body::{BodySpec, Joints2D, Joints3D};
use crate::error::{ensure_finite, Error, Result};
use crate::regressor::{decode, forward_raw, ModelWeights, RegressorSpec};

/// Lower bound applied to prior variances (degenerate source sets).
pub const PRIOR_VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian statistics of shape scales and pose parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStats {
    pub shape_mean: Vec<f64>,
    pub shape_var: Vec<f64>,
    pub pose_mean: Vec<f64>,
    pub pose_var: Vec<f64>,
}

impl PriorStats {
    /// Mean and (population) variance of each coordinate, with variances
    /// floored at [`PRIOR_VARIANCE_FLOOR`].
    pub fn estimate<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let mut n = 0usize;
        // shape sum, shape sum of squares, pose sum, pose sum of squares
        let mut sums: Option<[Vec<f64>; 4]> = None;
        for (shape, pose) in samples {
            let [ss, sq, ps, pq] = sums.get_or_insert_with(|| {
                [
                    vec![0.0; shape.len()],
                    vec![0.0; shape.len()],
                    vec![0.0; pose.len()],
                    vec![0.0; pose.len()],
                ]
            });
            if shape.len() != ss.len() || pose.len() != ps.len() {
                return Err(Error::invalid("prior samples have inconsistent dimensions"));
            }
            for (i, v) in shape.iter().enumerate() {
                ss[i] += v;
                sq[i] += v * v;
            }
            for (i, v) in pose.iter().enumerate() {
                ps[i] += v;
                pq[i] += v * v;
            }
            n += 1;
        }
        let [ss, sq, ps, pq] = sums.ok_or_else(|| Error::invalid("no samples for prior statistics"))?;
        let nf = n as f64;
        let finish = |s: Vec<f64>, q: Vec<f64>| {
            let mean: Vec<f64> = s.iter().map(|v| v / nf).collect();
            let var = q
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / nf - m * m).max(PRIOR_VARIANCE_FLOOR))
                .collect();
            (mean, var)
        };
        let (shape_mean, shape_var) = finish(ss, sq);
        let (pose_mean, pose_var) = finish(ps, pq);
        Ok(Self {
            shape_mean,
            shape_var,
            pose_mean,
            pose_var,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the 2D reprojection error.
    pub reprojection: f64,
    /// Weight of the prior distance.
    pub prior: f64,
    /// Weight of the supervised replay on a source sample.
    pub source: f64,
    /// Weight of the motion consistency term.
    pub motion: f64,
    /// Weight of the teacher consistency term.
    pub teacher: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reprojection: 10.0,
            prior: 1.0,
            source: 0.1,
            motion: 0.1,
            teacher: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.reprojection, self.prior, self.source, self.motion, self.teacher];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn frame(&self, reprojection: f64, prior: f64, source: f64) -> f64 {
        self.reprojection * reprojection + self.prior * prior + self.source * source
    }

    pub fn temporal(&self, motion: f64, teacher: f64) -> f64 {
        self.motion * motion + self.teacher * teacher
    }
}

/// Unweighted loss terms and their weighted totals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reprojection: f64,
    pub prior: f64,
    pub source_replay: f64,
    pub motion: f64,
    pub teacher: f64,
    /// `γ1·reprojection + γ2·prior + γ3·source_replay`
    pub frame_total: f64,
    /// `μ1·motion + μ2·teacher`
    pub temporal_total: f64,
}

impl LossBreakdown {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("reprojection", self.reprojection),
            ("prior", self.prior),
            ("source_replay", self.source_replay),
            ("motion", self.motion),
            ("teacher", self.teacher),
        ] {
            ensure_finite(name, v)?;
        }
        Ok(())
    }
}

/// A labeled source example used for supervised replay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayTarget<'a> {
    pub x: &'a [f64],
    pub joints3d: &'a Joints3D,
}

pub fn reprojection_term<S: Scalar>(predicted: &[[S; 2]], target: &Joints2D) -> S {
    let mut acc = S::zero();
    for (p, t) in predicted.iter().zip(&target.0) {
        acc = acc + (p[0] - t[0]).square() + (p[1] - t[1]).square();
    }
    acc
}

/// Mean squared standardized deviation of shape and pose from the prior.
pub fn prior_term<S: Scalar>(shape: &[S], pose: &[S], priors: &PriorStats) -> S {
    let mut acc = S::zero();
    for ((v, m), var) in shape.iter().zip(&priors.shape_mean).zip(&priors.shape_var) {
        acc = acc + (*v - *m).square() / *var;
    }
    for ((v, m), var) in pose.iter().zip(&priors.pose_mean).zip(&priors.pose_var) {
        acc = acc + (*v - *m).square() / *var;
    }
    acc / (shape.len() + pose.len()) as f64
}

/// Mean over joints of the squared root-aligned 3D error.
pub fn joint_error_term<S: Scalar>(predicted: &[[S; 3]], target: &Joints3D) -> S {
    let (p0, t0) = (predicted[0], target.0[0]);
    let mut acc = S::zero();
    for (p, t) in predicted.iter().zip(&target.0) {
        for i in 0..3 {
            acc = acc + ((p[i] - p0[i]) - (t[i] - t0[i])).square();
        }
    }
    acc / predicted.len() as f64
}

/// `‖(ĵ_i − ĵ_prev) − (j_i − j_prev)‖²`.
pub fn motion_term<S: Scalar>(
    current: &Joints2D,
    previous: &Joints2D,
    pred_current: &[[S; 2]],
    pred_previous: &[[S; 2]],
) -> S {
    let mut acc = S::zero();
    for k in 0..pred_current.len() {
        for i in 0..2 {
            let observed = current.0[k][i] - previous.0[k][i];
            acc = acc + ((pred_current[k][i] - pred_previous[k][i]) - observed).square();
        }
    }
    acc
}

/// Squared distance between teacher and student raw outputs.
pub fn teacher_term<S: Scalar>(teacher: &[f64], student: &[S]) -> S {
    let mut acc = S::zero();
    for (t, s) in teacher.iter().zip(student) {
        acc = acc + (*s - *t).square();
    }
    acc
}

/// Frame terms for a weight vector of any scalar type.
pub struct FrameTerms<S> {
    pub reprojection: S,
    pub prior: S,
    pub source_replay: S,
    /// Raw network output on the current observation, reused by temporal terms.
    pub raw: Vec<S>,
    pub keypoints: Vec<[S; 2]>,
}

/// Everything the frame loss needs besides the weights.
#[derive(Clone, Copy)]
pub struct FrameContext<'a> {
    pub spec: &'a RegressorSpec,
    pub body: &'a BodySpec,
    pub x: &'a [f64],
    pub keypoints: &'a Joints2D,
    pub replay: Option<ReplayTarget<'a>>,
    pub priors: &'a PriorStats,
}

impl FrameContext<'_> {
    fn validate(&self, weights: &LossWeights) -> Result<()> {
        if self.x.len() != self.spec.input_dim {
            return Err(Error::invalid(format!(
                "observation has {} features, model expects {}",
                self.x.len(),
                self.spec.input_dim
            )));
        }
        self.spec.check_body(self.body)?;
        if self.keypoints.len() != self.body.joint_count() {
            return Err(Error::invalid("keypoint count does not match the body"));
        }
        if weights.source > 0.0 && self.replay.is_none() {
            return Err(Error::invalid(
                "source replay weight is positive but no source sample was given",
            ));
        }
        if let Some(r) = &self.replay {
            if r.x.len() != self.spec.input_dim || r.joints3d.len() != self.body.joint_count() {
                return Err(Error::invalid("source sample does not match the model"));
            }
        }
        let k = self.body.joint_count();
        if self.priors.shape_mean.len() != k - 1 || self.priors.pose_mean.len() != 3 * k {
            return Err(Error::invalid("prior statistics do not match the body"));
        }
        Ok(())
    }

    pub fn terms<S: Scalar>(&self, phi: &[S], with_replay: bool) -> FrameTerms<S> {
        let k = self.body.joint_count();
        let raw = forward_raw(self.spec, phi, self.x);
        let (keypoints, prior) = {
            let d = decode(&raw, k);
            (d.joints2d(self.body), prior_term(&d.shape, d.pose, self.priors))
        };
        let reprojection = reprojection_term(&keypoints, self.keypoints);
        let source_replay = match (&self.replay, with_replay) {
            (Some(r), true) => {
                let src_raw = forward_raw(self.spec, phi, r.x);
                let joints = decode(&src_raw, k).joints3d(self.body);
                joint_error_term(&joints, r.joints3d)
            }
            _ => S::zero(),
        };
        FrameTerms {
            reprojection,
            prior,
            source_replay,
            raw,
            keypoints,
        }
    }
}

/// Previous-frame data for the motion term.
#[derive(Clone, Copy)]
pub struct MotionContext<'a> {
    pub x: &'a [f64],
    pub keypoints: &'a Joints2D,
}

/// Combined adaptation objective `[L_F] + [L_T]` over the student weights.
/// Which parts are active is chosen per scheme.
pub struct AdaptationObjective<'a> {
    pub frame: FrameContext<'a>,
    pub weights: LossWeights,
    pub include_frame: bool,
    pub include_temporal: bool,
    /// Frame `i − τ`; `None` at the start of a stream, where the motion term
    /// is defined as zero.
    pub previous: Option<MotionContext<'a>>,
    /// Teacher output on the current observation.
    pub teacher_output: Option<&'a [f64]>,
}

impl<'a> AdaptationObjective<'a> {
    pub fn new(frame: FrameContext<'a>, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        frame.validate(&weights)?;
        Ok(Self {
            frame,
            weights,
            include_frame: true,
            include_temporal: false,
            previous: None,
            teacher_output: None,
        })
    }

    pub fn frame_only(mut self) -> Self {
        self.include_frame = true;
        self.include_temporal = false;
        self
    }

    pub fn temporal_only(mut self) -> Self {
        self.include_frame = false;
        self.include_temporal = true;
        self
    }

    pub fn frame_and_temporal(mut self) -> Self {
        self.include_frame = true;
        self.include_temporal = true;
        self
    }

    pub fn with_temporal(
        mut self,
        previous: Option<MotionContext<'a>>,
        teacher_output: Option<&'a [f64]>,
    ) -> Result<Self> {
        if let Some(p) = &previous {
            if p.x.len() != self.frame.spec.input_dim || p.keypoints.len() != self.frame.body.joint_count() {
                return Err(Error::invalid("previous frame does not match the model"));
            }
        }
        if let Some(t) = teacher_output {
            if t.len() != self.frame.spec.output_dim() {
                return Err(Error::invalid("teacher output has the wrong length"));
            }
        }
        self.previous = previous;
        self.teacher_output = teacher_output;
        Ok(self)
    }

    /// Unweighted terms as a generic tuple `(reproj, prior, source, motion, teacher)`.
    fn raw_terms<S: Scalar>(&self, phi: &[S]) -> [S; 5] {
        let w = &self.weights;
        let need_replay = self.include_frame && w.source > 0.0;
        let f = self.frame.terms(phi, need_replay);
        let (mut motion, mut teacher) = (S::zero(), S::zero());
        if self.include_temporal {
            if let (Some(prev), true) = (&self.previous, w.motion > 0.0) {
                let raw_prev = forward_raw(self.frame.spec, phi, prev.x);
                let kp_prev = decode(&raw_prev, self.frame.body.joint_count()).joints2d(self.frame.body);
                motion = motion_term(self.frame.keypoints, prev.keypoints, &f.keypoints, &kp_prev);
            }
            if let (Some(t), true) = (self.teacher_output, w.teacher > 0.0) {
                teacher = teacher_term(t, &f.raw);
            }
        }
        [f.reprojection, f.prior, f.source_replay, motion, teacher]
    }

    /// Evaluates all terms in plain arithmetic.
    pub fn breakdown(&self, phi: &[f64]) -> Result<LossBreakdown> {
        let [r, p, s, m, t] = self.raw_terms(phi);
        let b = LossBreakdown {
            reprojection: r,
            prior: p,
            source_replay: s,
            motion: m,
            teacher: t,
            frame_total: self.weights.frame(r, p, s),
            temporal_total: self.weights.temporal(m, t),
        };
        b.check_finite()?;
        Ok(b)
    }
}

impl Objective for AdaptationObjective<'_> {
    fn evaluate<S: Scalar>(&self, phi: &[S]) -> S {
        let [r, p, s, m, t] = self.raw_terms(phi);
        let w = &self.weights;
        let mut total = S::zero();
        if self.include_frame {
            total = total + r * w.reprojection + p * w.prior + s * w.source;
        }
        if self.include_temporal {
            total = total + m * w.motion + t * w.teacher;
        }
        total
    }

    fn param_len(&self) -> Option<usize> {
        Some(self.frame.spec.param_count())
    }

    fn label(&self) -> &str {
        match (self.include_frame, self.include_temporal) {
            (true, true) => "frame+temporal loss",
            (false, true) => "temporal loss",
            _ => "frame loss",
        }
    }
}

/// Frame loss `L_F` of `weights` on one target frame.
pub fn frame_loss(weights: &ModelWeights, frame: FrameContext<'_>, lw: &LossWeights) -> Result<LossBreakdown> {
    let obj = AdaptationObjective::new(frame, *lw)?;
    obj.breakdown(weights.params())
}

pub fn motion_loss(
    current: &Joints2D,
    previous: &Joints2D,
    pred_current: &Joints2D,
    pred_previous: &Joints2D,
) -> Result<f64> {
    let n = current.len();
    if previous.len() != n || pred_current.len() != n || pred_previous.len() != n {
        return Err(Error::invalid("motion loss needs four keypoint sets of equal size"));
    }
    Ok(motion_term(current, previous, &pred_current.0, &pred_previous.0))
}

pub fn teacher_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "teacher output has {} entries, student {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(teacher_term(teacher, student))
}

/// `L_T = μ1·L_m + μ2·L_mt`, reported alongside both sub-terms.
pub fn temporal_loss(motion: f64, teacher: f64, lw: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        motion,
        teacher,
        temporal_total: lw.temporal(motion, teacher),
        ..LossBreakdown::default()
    }
}
