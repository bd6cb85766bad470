//! Supervised pretraining of the regressor on the source domain.

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_gradient, Objective, ParamVector, Scalar};
use crate::body::BodySpec;
use crate::error::{Error, Result};
use crate::losses::joint_error_term;
use crate::metrics::{FrameMetrics, MetricsReport, DEFAULT_PCK_THRESHOLD};
use crate::regressor::{decode, forward_raw, init_weights, predict, ModelWeights, RegressorSpec};
use crate::world::SourceSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    /// Optimizer steps; 0 returns the initialization.
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Weight of the squared error on raw parameters (pose, log shape,
    /// log scale, translation) relative to the 3D joint term.
    pub param_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            steps: 3000,
            batch: 16,
            learning_rate: 3e-3,
            param_weight: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.param_weight.is_finite() && self.param_weight >= 0.0) {
            return Err(Error::invalid("param_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Raw output the regressor should produce for a sample.
pub fn raw_target(sample: &SourceSample) -> Vec<f64> {
    let t = &sample.truth;
    let mut v = t.pose.flat();
    v.extend(t.shape.0.iter().map(|b| b.ln()));
    v.extend([t.camera.scale.ln(), t.camera.tx, t.camera.ty]);
    v
}

struct BatchLoss<'a> {
    spec: &'a RegressorSpec,
    body: &'a BodySpec,
    samples: Vec<(&'a SourceSample, Vec<f64>)>,
    param_weight: f64,
}

impl Objective for BatchLoss<'_> {
    fn evaluate<S: Scalar>(&self, phi: &[S]) -> S {
        let k = self.body.joint_count();
        let mut total = S::zero();
        for (s, target) in &self.samples {
            let raw = forward_raw(self.spec, phi, &s.x);
            let joints = decode(&raw, k).joints3d(self.body);
            total = total + joint_error_term(&joints, &s.truth.joints3d);
            if self.param_weight > 0.0 {
                let mut p = S::zero();
                for (r, t) in raw.iter().zip(target) {
                    p = p + (*r - *t).square();
                }
                total = total + p * self.param_weight;
            }
        }
        total * (1.0 / self.samples.len() as f64)
    }

    fn label(&self) -> &str {
        "pretraining loss"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// `(step, minibatch loss)` every `log_every` steps.
    pub losses: Vec<(usize, f64)>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    rate: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, rate: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            rate,
        }
    }

    fn step(&mut self, phi: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..phi.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            phi[i] -= self.rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a fresh regressor on `train`. Deterministic in `cfg.seed`.
pub fn pretrain(
    body: &BodySpec,
    train: &[SourceSample],
    cfg: &PretrainConfig,
) -> Result<(ModelWeights, PretrainReport)> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::invalid("no training samples"))?;
    let spec = RegressorSpec::new(first.x.len(), cfg.hidden.clone(), body.joint_count())?;
    spec.check_body(body)?;
    if train.iter().any(|s| s.x.len() != spec.input_dim) {
        return Err(Error::invalid("training samples have inconsistent observation sizes"));
    }
    let init = init_weights(&spec, cfg.seed);
    let mut phi: ParamVector = init.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut adam = Adam::new(phi.len(), cfg.learning_rate);
    let batch = cfg.batch.min(train.len());
    let log_every = (cfg.steps / 50).max(1);
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, train.len(), batch);
        let obj = BatchLoss {
            spec: &spec,
            body,
            samples: idx.iter().map(|i| (&train[i], raw_target(&train[i]))).collect(),
            param_weight: cfg.param_weight,
        };
        let (loss, g) =
            value_and_gradient(&obj, &phi).map_err(|e| Error::numerical("pretraining", format!("step {step}: {e}")))?;
        if step % log_every == 0 || step + 1 == cfg.steps {
            losses.push((step, loss));
        }
        adam.step(&mut phi, &g);
    }
    Ok((init.with_params(phi)?, PretrainReport { losses }))
}

/// Per-sample metrics of `weights` on held-out source data.
pub fn evaluate(weights: &ModelWeights, body: &BodySpec, samples: &[SourceSample]) -> Result<MetricsReport> {
    let frames = samples
        .iter()
        .map(|s| {
            let p = predict(weights, &s.x)?;
            FrameMetrics::evaluate(&p.joints3d(body), &s.truth.joints3d, DEFAULT_PCK_THRESHOLD)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(frames, DEFAULT_PCK_THRESHOLD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_body;
    use crate::world::{make_source_dataset, DomainConfig};

    #[test]
    fn zero_steps_returns_initialization() {
        let body = default_body(4).unwrap();
        let ds = make_source_dataset(&DomainConfig::default(), &body, 10, 0).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            hidden: vec![4],
            ..Default::default()
        };
        let (w, report) = pretrain(&body, &ds.samples, &cfg).unwrap();
        let spec = RegressorSpec::new(ds.samples[0].x.len(), vec![4], 4).unwrap();
        assert_eq!(w, init_weights(&spec, 0));
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let body = default_body(4).unwrap();
        let ds = make_source_dataset(&DomainConfig::default(), &body, 64, 0).unwrap();
        let cfg = PretrainConfig {
            steps: 200,
            hidden: vec![8],
            batch: 8,
            ..Default::default()
        };
        let (a, ra) = pretrain(&body, &ds.samples, &cfg).unwrap();
        let (b, _) = pretrain(&body, &ds.samples, &cfg).unwrap();
        assert_eq!(a, b);
        let first = ra.losses.first().unwrap().1;
        let last = ra.losses.last().unwrap().1;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn raw_target_decodes_to_truth() {
        let body = default_body(13).unwrap();
        let ds = make_source_dataset(&DomainConfig::default(), &body, 1, 0).unwrap();
        let s = &ds.samples[0];
        let p = crate::regressor::Prediction::from_raw(raw_target(s), 13).unwrap();
        let j = p.joints3d(&body);
        for (a, b) in j.0.iter().zip(&s.truth.joints3d.0) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }
}
