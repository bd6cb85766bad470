//! Browser demo: per-frame adaptation curves, a skeleton viewer comparing
//! frozen and adapted predictions, and a two-parameter bilevel toy.

use bilevel_adapt::adaptation::{adapt_stream, AdaptConfig, AdaptContext, Scheme};
use bilevel_adapt::body::{default_body, project, BodySpec, CameraParams, Joints3D, HUMANOID_JOINTS};
use bilevel_adapt::losses::LossWeights;
use bilevel_adapt::pretrain::{pretrain, PretrainConfig};
use bilevel_adapt::regressor::ModelWeights;
use bilevel_adapt::world::{make_source_dataset, make_target_stream, DomainConfig, SourceDataset, StreamSample};
use wasm_bindgen::prelude::*;

/// A small pretrained model and the last adapted stream.
#[wasm_bindgen]
pub struct Demo {
    body: BodySpec,
    source: SourceDataset,
    base: ModelWeights,
    stream: Vec<StreamSample>,
    frozen: Vec<Joints3D>,
    adapted: Vec<Joints3D>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[wasm_bindgen]
impl Demo {
    /// Pretrains on a reduced source set; takes a second or two in the browser.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let body = default_body(HUMANOID_JOINTS).map_err(err)?;
        let source = make_source_dataset(&DomainConfig::default(), &body, 800, seed as u64).map_err(err)?;
        let cfg = PretrainConfig {
            steps: 600,
            seed: seed as u64,
            ..PretrainConfig::default()
        };
        let (base, _) = pretrain(&body, &source.samples, &cfg).map_err(err)?;
        Ok(Demo {
            body,
            source,
            base,
            stream: Vec::new(),
            frozen: Vec::new(),
            adapted: Vec::new(),
        })
    }

    /// Parent index of each joint; the root is its own parent.
    pub fn parents(&self) -> Vec<u32> {
        self.body.parents().iter().map(|&p| p as u32).collect()
    }

    /// Adapts on a fresh shifted stream and returns per-frame MPJPE,
    /// `[frozen_0, adapted_0, frozen_1, adapted_1, ...]`.
    pub fn run(
        &mut self,
        scheme: &str,
        frames: u32,
        stream_seed: u32,
        eta: f64,
        steps: u32,
    ) -> Result<Vec<f64>, String> {
        let scheme: Scheme = scheme.parse().map_err(err)?;
        self.stream = make_target_stream(
            &DomainConfig::shifted(),
            &self.body,
            frames as usize,
            stream_seed as u64,
            None,
        )
        .map_err(err)?;
        let loss = LossWeights::default();
        let ctx = AdaptContext {
            body: &self.body,
            source: &self.source,
            loss: &loss,
        };
        let base_cfg = AdaptConfig {
            steps: steps.max(1) as usize,
            eta,
            ..AdaptConfig::default()
        };
        let frozen = adapt_stream(
            &self.base,
            &self.stream,
            ctx,
            &AdaptConfig {
                scheme: Scheme::Frozen,
                ..base_cfg.clone()
            },
        )
        .map_err(err)?;
        let adapted = adapt_stream(&self.base, &self.stream, ctx, &AdaptConfig { scheme, ..base_cfg }).map_err(err)?;
        self.frozen = frozen.predictions.iter().map(|p| p.joints3d(&self.body)).collect();
        self.adapted = adapted.predictions.iter().map(|p| p.joints3d(&self.body)).collect();
        Ok(frozen
            .diagnostics
            .iter()
            .zip(&adapted.diagnostics)
            .flat_map(|(f, a)| [f.metrics.mpjpe, a.metrics.mpjpe])
            .collect())
    }

    /// Root-centred truth, frozen and adapted skeletons of one frame of the
    /// last run, rotated by `yaw` about the vertical axis and projected:
    /// three blocks of `2·K` coordinates.
    pub fn view(&self, frame: u32, yaw: f64) -> Result<Vec<f64>, String> {
        let i = frame as usize;
        if i >= self.adapted.len() {
            return Err(format!(
                "frame {i} is outside the last run ({} frames)",
                self.adapted.len()
            ));
        }
        let cam = CameraParams::new(1.0, 0.0, 0.0).map_err(err)?;
        let (s, c) = yaw.sin_cos();
        let mut out = Vec::new();
        for j in [&self.stream[i].truth.joints3d, &self.frozen[i], &self.adapted[i]] {
            let root = j.0[0];
            let turned = Joints3D(
                j.0.iter()
                    .map(|p| {
                        let (x, y, z) = (p[0] - root[0], p[1] - root[1], p[2] - root[2]);
                        [c * x + s * z, y, -s * x + c * z]
                    })
                    .collect(),
            );
            out.extend(project(&turned, &cam).0.iter().flatten());
        }
        Ok(out)
    }
}

/// Gradient descent on `f(x, y) = ½(k·x² + y²)` next to the bilevel update
/// `(I − αH)·∇f(φ − α∇f(φ))` on the same function, both from `(1, 1)`.
/// Returns `steps + 1` points of each path, plain first.
#[wasm_bindgen]
pub fn bilevel_toy(stiffness: f64, alpha: f64, eta: f64, steps: u32) -> Vec<f64> {
    let grad = |p: [f64; 2]| [stiffness * p[0], p[1]];
    let mut plain = [1.0, 1.0];
    let mut bilevel = [1.0, 1.0];
    let mut out_plain = vec![plain[0], plain[1]];
    let mut out_bilevel = vec![bilevel[0], bilevel[1]];
    for _ in 0..steps {
        let g = grad(plain);
        plain = [plain[0] - eta * g[0], plain[1] - eta * g[1]];
        let g = grad(bilevel);
        let probe = [bilevel[0] - alpha * g[0], bilevel[1] - alpha * g[1]];
        let up = grad(probe);
        let h = [stiffness, 1.0];
        bilevel = [
            bilevel[0] - eta * (1.0 - alpha * h[0]) * up[0],
            bilevel[1] - eta * (1.0 - alpha * h[1]) * up[1],
        ];
        out_plain.extend(plain);
        out_bilevel.extend(bilevel);
    }
    out_plain.extend(out_bilevel);
    out_plain
}
