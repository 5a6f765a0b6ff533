//! Browser bindings. A small family trains in the page, then three views
//! read from it: early-exit generation, per-layer cosine similarity and the
//! truncation-loss curve of one projection.
//!
//! Every operation returns JSON text. The `try_*` methods hold the logic so
//! native tests can call them without a JS runtime.

use familykit::compress::{capture_activations, WhitenedSvd};
use familykit::data::Batcher;
use familykit::expand::layer_cosine_similarity;
use familykit::infer::{generate, ExitPolicy};
use familykit::linalg::Mat;
use familykit::model::{FamilialModel, FamilyConfig};
use familykit::synth::synthetic_text;
use familykit::tokenizer::{ByteTokenizer, BOS};
use familykit::train::{LambdaSchedule, TrainConfig, TrainState};
use familykit::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Model used by the page: two exits over a four-layer backbone.
pub fn demo_config() -> FamilyConfig {
    FamilyConfig {
        hidden: 32,
        ctx_len: 64,
        ..FamilyConfig::desk()
    }
}

pub fn demo_train_config(total_steps: u64) -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: (total_steps / 10).max(1),
        total_steps,
        batch: 8,
        seq_len: 48,
        ..TrainConfig::desk()
    }
}

#[derive(Serialize)]
struct Progress {
    step: u64,
    total: u64,
    losses: Vec<f64>,
}

#[derive(Serialize)]
struct GeneratedToken {
    text: String,
    exit: usize,
    depth: usize,
    confidences: Vec<f64>,
}

#[derive(Serialize)]
struct Generation {
    prompt: String,
    tokens: Vec<GeneratedToken>,
    mean_depth: f64,
    backbone_calls: usize,
    head_calls: usize,
    backfill_calls: usize,
}

#[derive(Serialize)]
struct Heatmap {
    branch: usize,
    layers: Vec<String>,
    tokens: Vec<String>,
    scores: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct RankCurve {
    name: String,
    rows: usize,
    cols: usize,
    singular_values: Vec<f64>,
    /// `loss[r - 1]` is the whitened truncation loss at rank `r`.
    loss: Vec<f64>,
}

#[wasm_bindgen]
pub struct Demo {
    state: TrainState,
    data: Batcher,
    cfg: TrainConfig,
    schedule: LambdaSchedule,
    calibration: Vec<Vec<u32>>,
}

impl Demo {
    pub fn try_new(seed: u64, total_steps: u64) -> Result<Demo> {
        let model = FamilialModel::init(demo_config(), seed)?;
        let cfg = demo_train_config(total_steps);
        cfg.validate()?;
        let corpus = synthetic_text(seed, 48 * 1024);
        let data = Batcher::from_bytes(corpus.as_bytes(), cfg.seq_len, cfg.batch, seed)?;
        let calib_text = synthetic_text(seed.wrapping_add(1), 4 * 1024);
        let calibration = ByteTokenizer
            .encode(calib_text.as_bytes())
            .chunks_exact(48)
            .take(16)
            .map(<[u32]>::to_vec)
            .collect();
        let schedule = LambdaSchedule::default_for(model.n_exits(), total_steps);
        Ok(Demo {
            state: TrainState::new(model),
            data,
            cfg,
            schedule,
            calibration,
        })
    }

    pub fn model(&self) -> &FamilialModel {
        &self.state.model
    }

    pub fn try_train(&mut self, steps: u32) -> Result<String> {
        let end = (self.state.step + steps as u64).min(self.cfg.total_steps);
        self.state.train_until(&self.data, &self.cfg, &self.schedule, end, |_| {})?;
        let losses = self.state.metrics.last().map(|m| m.branch_losses.clone()).unwrap_or_default();
        json(&Progress {
            step: self.state.step,
            total: self.cfg.total_steps,
            losses,
        })
    }

    pub fn try_generate(&self, prompt: &str, threshold: f64, max_new: usize) -> Result<String> {
        let mut ids = ByteTokenizer.encode(prompt.as_bytes());
        if ids.is_empty() {
            ids.push(BOS);
        }
        let model = self.model();
        let room = model.config.ctx_len.saturating_sub(ids.len());
        let trace = generate(model, &ids, &ExitPolicy::greedy(threshold), max_new.min(room))?;
        let tokens: Vec<GeneratedToken> = trace
            .records
            .iter()
            .zip(&trace.exits)
            .map(|(r, &k)| GeneratedToken {
                text: ByteTokenizer.token_text(r.token_id),
                exit: k,
                depth: r.exit_depth,
                confidences: r.confidences.clone(),
            })
            .collect();
        let mean_depth = if tokens.is_empty() {
            0.0
        } else {
            tokens.iter().map(|t| t.depth as f64).sum::<f64>() / tokens.len() as f64
        };
        json(&Generation {
            prompt: prompt.to_string(),
            tokens,
            mean_depth,
            backbone_calls: trace.counts.backbone,
            head_calls: trace.counts.head,
            backfill_calls: trace.counts.backfill,
        })
    }

    pub fn try_cosine(&self, text: &str, branch: usize) -> Result<String> {
        let ids = ByteTokenizer.encode(text.as_bytes());
        let ids = &ids[..ids.len().min(self.model().config.ctx_len)];
        let map = layer_cosine_similarity(self.model(), ids, branch)?;
        json(&Heatmap {
            branch,
            layers: map.layers,
            tokens: map.tokens.iter().map(|&t| ByteTokenizer.token_text(t)).collect(),
            scores: map.scores,
        })
    }

    pub fn try_rank_curve(&self, name: &str) -> Result<String> {
        let model = self.model();
        let lin = model
            .linear(name)
            .ok_or_else(|| Error::Input(format!("no projection named {name}")))?;
        let calib = capture_activations(model, &self.calibration, &[name.to_string()])?;
        let w = Mat::from_tensor(&lin.dense())?;
        let svd = WhitenedSvd::new(&w, &calib.grams[name].matrix())?;
        let loss = (1..=svd.max_rank()).map(|r| svd.loss(r)).collect::<Result<Vec<_>>>()?;
        json(&RankCurve {
            name: name.to_string(),
            rows: w.rows(),
            cols: w.cols(),
            singular_values: svd.singular_values().to_vec(),
            loss,
        })
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Input(e.to_string()))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, total_steps: u32) -> std::result::Result<Demo, JsError> {
        Demo::try_new(seed as u64, total_steps as u64).map_err(js)
    }

    /// Runs up to `steps` more updates; returns `{step, total, losses}`.
    pub fn train(&mut self, steps: u32) -> std::result::Result<String, JsError> {
        self.try_train(steps).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    #[wasm_bindgen(js_name = projectionNames)]
    pub fn projection_names(&self) -> Vec<String> {
        self.model().linear_names()
    }

    pub fn generate(&self, prompt: &str, threshold: f64, max_new: usize) -> std::result::Result<String, JsError> {
        self.try_generate(prompt, threshold, max_new).map_err(js)
    }

    pub fn cosine(&self, text: &str, branch: usize) -> std::result::Result<String, JsError> {
        self.try_cosine(text, branch).map_err(js)
    }

    #[wasm_bindgen(js_name = rankCurve)]
    pub fn rank_curve(&self, name: &str) -> std::result::Result<String, JsError> {
        self.try_rank_curve(name).map_err(js)
    }
}
