//! Online adaptation loop over a target stream.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilevel_gradient, gradient, ParamVector, SecondOrder};
use crate::body::{BodySpec, Joints2D};
use crate::error::{Error, Result};
use crate::losses::{AdaptationObjective, FrameContext, LossBreakdown, LossWeights, MotionContext, ReplayTarget};
use crate::metrics::{FrameMetrics, DEFAULT_PCK_THRESHOLD};
use crate::regressor::{forward_raw, predict, ModelWeights, Prediction, TeacherWeights};
use crate::world::{SourceDataset, StreamSample};

/// Update rule applied to every frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    /// No adaptation.
    Frozen,
    /// One plain step on `L_F` per frame, independent of `T`.
    Baseline,
    /// Plain steps on `L_F`.
    B1,
    /// Plain steps on `L_T`.
    B2,
    /// Plain steps on `L_F + L_T`.
    B3,
    /// Committed step on `L_F` (rate α), then a step on `L_T` (rate η).
    B4,
    /// Committed step on `L_F` (rate α), then a step on `L_F + L_T` (rate η).
    B5,
    /// Bilevel: probe on `L_F`, upper loss `L_T`.
    B6,
    /// Bilevel: probe on `L_F`, upper loss `L_F + L_T`.
    Final,
}

impl Scheme {
    pub const ABLATION: [Scheme; 7] = [
        Scheme::B1,
        Scheme::B2,
        Scheme::B3,
        Scheme::B4,
        Scheme::B5,
        Scheme::B6,
        Scheme::Final,
    ];

    pub fn is_bilevel(self) -> bool {
        matches!(self, Scheme::B6 | Scheme::Final)
    }

    fn uses_temporal(self) -> bool {
        !matches!(self, Scheme::Frozen | Scheme::Baseline | Scheme::B1)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::Frozen => "Frozen",
            Scheme::Baseline => "Baseline",
            Scheme::B1 => "B1",
            Scheme::B2 => "B2",
            Scheme::B3 => "B3",
            Scheme::B4 => "B4",
            Scheme::B5 => "B5",
            Scheme::B6 => "B6",
            Scheme::Final => "Final",
        };
        f.write_str(s)
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "frozen" => Scheme::Frozen,
            "baseline" => Scheme::Baseline,
            "b1" => Scheme::B1,
            "b2" => Scheme::B2,
            "b3" => Scheme::B3,
            "b4" => Scheme::B4,
            "b5" => Scheme::B5,
            "b6" => Scheme::B6,
            "final" | "boa" => Scheme::Final,
            _ => return Err(Error::invalid(format!("unknown scheme {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Lower-level (probe) rate α.
    pub alpha: f64,
    /// Upper-level rate η.
    pub eta: f64,
    /// Teacher EMA decay δ.
    pub delta: f64,
    /// Motion interval τ in frames.
    pub tau: usize,
    /// Inner iterations T per frame.
    pub steps: usize,
    pub scheme: Scheme,
    #[serde(with = "second_order_str")]
    pub second_order: SecondOrder,
    pub seed: u64,
    /// Measure per-frame wall time. Off by default so diagnostics are
    /// reproducible byte for byte.
    pub record_timing: bool,
}

mod second_order_str {
    use super::SecondOrder;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &SecondOrder, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SecondOrder, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5e-4,
            eta: 1e-3,
            delta: 0.9,
            tau: 1,
            steps: 1,
            scheme: Scheme::Final,
            second_order: SecondOrder::Exact,
            seed: 0,
            record_timing: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("at least one inner step is required"));
        }
        if self.tau == 0 {
            return Err(Error::invalid("motion interval must be at least one frame"));
        }
        Ok(())
    }
}

/// Fixed inputs shared by every frame of a run.
#[derive(Clone, Copy)]
pub struct AdaptContext<'a> {
    pub body: &'a BodySpec,
    pub source: &'a SourceDataset,
    pub loss: &'a LossWeights,
}

#[derive(Clone, Debug, PartialEq)]
struct BufferedFrame {
    x: Vec<f64>,
    keypoints: Joints2D,
}

/// Student, teacher, recent frames and the source sampler of one stream.
#[derive(Clone, Debug)]
pub struct AdaptState {
    weights: ModelWeights,
    teacher: TeacherWeights,
    buffer: VecDeque<BufferedFrame>,
    frame: usize,
    teacher_updates: usize,
    rng: ChaCha8Rng,
}

impl AdaptState {
    /// Fresh state with `ω₀ = φ₀`.
    pub fn new(base: &ModelWeights, seed: u64) -> Self {
        Self {
            weights: base.clone(),
            teacher: TeacherWeights::from_student(base),
            buffer: VecDeque::new(),
            frame: 0,
            teacher_updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn teacher(&self) -> &TeacherWeights {
        &self.teacher
    }

    /// Number of frames consumed so far.
    pub fn frame_index(&self) -> usize {
        self.frame
    }

    pub fn teacher_updates(&self) -> usize {
        self.teacher_updates
    }

    pub fn buffered_frames(&self) -> usize {
        self.buffer.len()
    }

    /// Frame `i − τ`, once enough history exists.
    fn previous(&self, tau: usize) -> Option<MotionContext<'_>> {
        (self.buffer.len() >= tau).then(|| {
            let f = &self.buffer[self.buffer.len() - tau];
            MotionContext {
                x: &f.x,
                keypoints: &f.keypoints,
            }
        })
    }

    fn draw_source(&mut self, source: &SourceDataset, loss: &LossWeights) -> Option<usize> {
        (loss.source > 0.0 && !source.samples.is_empty()).then(|| self.rng.random_range(0..source.samples.len()))
    }
}

/// Per-frame record of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub scheme: Scheme,
    /// Loss terms at the committed weights.
    pub losses: LossBreakdown,
    pub metrics: FrameMetrics,
    /// Mean squared 2D error over the squared diagonal of the true keypoint box.
    pub normalized_2d: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptRun {
    pub predictions: Vec<Prediction>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

struct FrameInputs<'a> {
    ctx: AdaptContext<'a>,
    weights: &'a ModelWeights,
    sample: &'a StreamSample,
    previous: Option<MotionContext<'a>>,
    teacher_out: Option<&'a [f64]>,
    replay: Option<ReplayTarget<'a>>,
}

impl<'a> FrameInputs<'a> {
    fn objective(&self) -> Result<AdaptationObjective<'a>> {
        let frame = FrameContext {
            spec: self.weights.spec(),
            body: self.ctx.body,
            x: &self.sample.x,
            keypoints: &self.sample.keypoints,
            replay: self.replay,
            priors: &self.ctx.source.priors,
        };
        AdaptationObjective::new(frame, *self.ctx.loss)?.with_temporal(self.previous, self.teacher_out)
    }

    fn frame_obj(&self) -> Result<AdaptationObjective<'a>> {
        Ok(self.objective()?.frame_only())
    }

    fn temporal_obj(&self) -> Result<AdaptationObjective<'a>> {
        Ok(self.objective()?.temporal_only())
    }

    fn joint_obj(&self) -> Result<AdaptationObjective<'a>> {
        Ok(self.objective()?.frame_and_temporal())
    }
}

fn descend(phi: &ParamVector, rate: f64, grad: &[f64]) -> ParamVector {
    if rate == 0.0 {
        phi.clone()
    } else {
        phi.axpy(-rate, grad)
    }
}

fn plain_step(phi: &ParamVector, rate: f64, obj: &AdaptationObjective<'_>) -> Result<ParamVector> {
    if rate == 0.0 {
        return Ok(phi.clone());
    }
    Ok(descend(phi, rate, &gradient(obj, phi)?))
}

fn bilevel_step(phi: &ParamVector, inputs: &FrameInputs<'_>, cfg: &AdaptConfig) -> Result<ParamVector> {
    if cfg.eta == 0.0 {
        return Ok(phi.clone());
    }
    let lower = inputs.frame_obj()?;
    let upper = match cfg.scheme {
        Scheme::B6 => inputs.temporal_obj()?,
        _ => inputs.joint_obj()?,
    };
    let g = bilevel_gradient(&lower, &upper, phi, cfg.alpha, cfg.second_order)?;
    Ok(descend(phi, cfg.eta, &g.grad))
}

/// One inner iteration of the configured scheme starting from `phi`.
fn inner_step(phi: &ParamVector, inputs: &FrameInputs<'_>, cfg: &AdaptConfig) -> Result<ParamVector> {
    match cfg.scheme {
        Scheme::Frozen => Ok(phi.clone()),
        Scheme::Baseline | Scheme::B1 => plain_step(phi, cfg.eta, &inputs.frame_obj()?),
        Scheme::B2 => plain_step(phi, cfg.eta, &inputs.temporal_obj()?),
        Scheme::B3 => plain_step(phi, cfg.eta, &inputs.joint_obj()?),
        Scheme::B4 => {
            let mid = plain_step(phi, cfg.alpha, &inputs.frame_obj()?)?;
            plain_step(&mid, cfg.eta, &inputs.temporal_obj()?)
        }
        Scheme::B5 => {
            let mid = plain_step(phi, cfg.alpha, &inputs.frame_obj()?)?;
            plain_step(&mid, cfg.eta, &inputs.joint_obj()?)
        }
        Scheme::B6 | Scheme::Final => bilevel_step(phi, inputs, cfg),
    }
}

fn teacher_output(state: &AdaptState, sample: &StreamSample) -> Vec<f64> {
    let t = state.teacher.as_model();
    forward_raw(t.spec(), t.params(), &sample.x)
}

fn check_sample(state: &AdaptState, sample: &StreamSample, ctx: &AdaptContext<'_>) -> Result<()> {
    let spec = state.weights.spec();
    if sample.x.len() != spec.input_dim {
        return Err(Error::invalid(format!(
            "observation has {} features, model expects {}",
            sample.x.len(),
            spec.input_dim
        )));
    }
    spec.check_body(ctx.body)
}

/// Uncommitted probe `φ′ = φ − α∇L_F(φ)` for `sample` at the current weights.
pub fn lower_probe(
    state: &AdaptState,
    sample: &StreamSample,
    replay: Option<ReplayTarget<'_>>,
    ctx: AdaptContext<'_>,
    cfg: &AdaptConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    check_sample(state, sample, &ctx)?;
    let inputs = FrameInputs {
        ctx,
        weights: &state.weights,
        sample,
        previous: None,
        teacher_out: None,
        replay,
    };
    plain_step(state.weights.params(), cfg.alpha, &inputs.frame_obj()?)
}

/// `φ − η·∇_φ L_up(φ − α∇L_F(φ))` for a bilevel scheme. The state is not
/// modified.
pub fn upper_update(
    state: &AdaptState,
    sample: &StreamSample,
    replay: Option<ReplayTarget<'_>>,
    ctx: AdaptContext<'_>,
    cfg: &AdaptConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    if !cfg.scheme.is_bilevel() {
        return Err(Error::invalid(format!("{} is not a bilevel scheme", cfg.scheme)));
    }
    check_sample(state, sample, &ctx)?;
    let teacher_out = teacher_output(state, sample);
    let inputs = FrameInputs {
        ctx,
        weights: &state.weights,
        sample,
        previous: state.previous(cfg.tau),
        teacher_out: Some(&teacher_out),
        replay,
    };
    bilevel_step(state.weights.params(), &inputs, cfg)
}

fn bbox_diagonal_sq(kp: &Joints2D) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &kp.0 {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)
}

/// Mean squared 2D keypoint error normalized by the squared diagonal of the
/// ground-truth bounding box.
pub fn normalized_2d_error(pred: &Joints2D, truth: &Joints2D) -> f64 {
    let n = truth.len().max(1) as f64;
    let mse = pred
        .0
        .iter()
        .zip(&truth.0)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum::<f64>()
        / n;
    let diag = bbox_diagonal_sq(truth);
    if diag > 0.0 {
        mse / diag
    } else {
        mse
    }
}

/// Adapts on one frame, commits `φ_i`, updates the teacher once and returns
/// the prediction of `φ_i` on the frame.
pub fn adapt_frame(
    state: &mut AdaptState,
    sample: &StreamSample,
    ctx: AdaptContext<'_>,
    cfg: &AdaptConfig,
) -> Result<(Prediction, FrameDiagnostics)> {
    let start = cfg.record_timing.then(Instant::now);
    check_sample(state, sample, &ctx)?;
    let teacher_out = cfg.scheme.uses_temporal().then(|| teacher_output(state, sample));
    let steps = if cfg.scheme == Scheme::Baseline { 1 } else { cfg.steps };
    let mut draws = Vec::with_capacity(steps);
    for _ in 0..steps {
        draws.push(state.draw_source(ctx.source, ctx.loss));
    }
    let replay_of = |d: Option<usize>| {
        d.map(|i| {
            let s = &ctx.source.samples[i];
            ReplayTarget {
                x: &s.x,
                joints3d: &s.truth.joints3d,
            }
        })
    };
    let mut phi = state.weights.params().clone();
    let mut last_replay = None;
    for draw in &draws {
        let inputs = FrameInputs {
            ctx,
            weights: &state.weights,
            sample,
            previous: state.previous(cfg.tau),
            teacher_out: teacher_out.as_deref(),
            replay: replay_of(*draw),
        };
        phi = inner_step(&phi, &inputs, cfg)?;
        last_replay = inputs.replay;
    }
    let teacher_for_losses = match &teacher_out {
        Some(t) => t.clone(),
        None => teacher_output(state, sample),
    };
    let losses = FrameInputs {
        ctx,
        weights: &state.weights,
        sample,
        previous: state.previous(cfg.tau),
        teacher_out: Some(&teacher_for_losses),
        replay: last_replay
            .or_else(|| replay_of((ctx.loss.source > 0.0 && !ctx.source.samples.is_empty()).then_some(0))),
    }
    .joint_obj()?
    .breakdown(&phi)?;

    let weights = state.weights.with_params(phi)?;
    let prediction = predict(&weights, &sample.x)?;
    let joints = prediction.joints3d(ctx.body);
    let metrics = FrameMetrics::evaluate(&joints, &sample.truth.joints3d, DEFAULT_PCK_THRESHOLD)?;
    let normalized_2d = normalized_2d_error(&prediction.joints2d(ctx.body), &sample.keypoints);

    state.teacher = crate::regressor::teacher_update(&state.teacher, &weights, cfg.delta)?;
    state.teacher_updates += 1;
    state.weights = weights;
    state.buffer.push_back(BufferedFrame {
        x: sample.x.clone(),
        keypoints: sample.keypoints.clone(),
    });
    while state.buffer.len() > cfg.tau {
        state.buffer.pop_front();
    }
    state.frame += 1;

    let wall_ms = start.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3);
    let diag = FrameDiagnostics {
        frame: sample.frame,
        scheme: cfg.scheme,
        losses,
        metrics,
        normalized_2d,
        wall_ms,
    };
    Ok((prediction, diag))
}

/// Runs the scheme over the whole stream in order, starting from `base`.
pub fn adapt_stream(
    base: &ModelWeights,
    stream: &[StreamSample],
    ctx: AdaptContext<'_>,
    cfg: &AdaptConfig,
) -> Result<AdaptRun> {
    cfg.validate()?;
    ctx.loss.validate()?;
    let mut state = AdaptState::new(base, cfg.seed);
    let mut run = AdaptRun {
        predictions: Vec::with_capacity(stream.len()),
        diagnostics: Vec::with_capacity(stream.len()),
    };
    for (i, sample) in stream.iter().enumerate() {
        let (p, d) = adapt_frame(&mut state, sample, ctx, cfg).map_err(|e| Error::Frame {
            frame: i,
            source: Box::new(e),
        })?;
        run.predictions.push(p);
        run.diagnostics.push(d);
    }
    Ok(run)
}

pub const DIAGNOSTICS_HEADER: &str =
    "frame,scheme,reprojection,prior,source_replay,frame_loss,motion,teacher,temporal_loss,mpjpe,pa_mpjpe,pck,normalized_2d,wall_ms";

pub fn diagnostics_csv(rows: &[FrameDiagnostics]) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for d in rows {
        let l = &d.losses;
        let m = &d.metrics;
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            d.frame,
            d.scheme,
            l.reprojection,
            l.prior,
            l.source_replay,
            l.frame_total,
            l.motion,
            l.teacher,
            l.temporal_total,
            m.mpjpe,
            m.pa_mpjpe,
            m.pck,
            d.normalized_2d,
            d.wall_ms
        ));
    }
    out
}
