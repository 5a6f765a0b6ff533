//! Joint optimization of every exit: the weighted branch loss, its weight
//! schedule, the learning-rate schedule and a freeze-aware AdamW.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Batcher;
use crate::error::{Error, Result};
use crate::model::{FamilialModel, ForwardPass};
use crate::tokenizer::PAD;

/// `Σ λ_k · L_k`, accumulated in binary64.
pub fn joint_loss(branch_losses: &[f64], weights: &[f64]) -> Result<f64> {
    if branch_losses.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} branch losses but {} weights",
            branch_losses.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Config(format!("branch weight {w} is negative")));
    }
    Ok(branch_losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    LinearDecay,
    CosineDecay,
}

/// Per-branch loss weights over training. The last branch is the main
/// backbone and stays at 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSchedule {
    pub kind: ScheduleKind,
    pub initial: Vec<f64>,
    #[serde(rename = "final")]
    pub final_weights: Vec<f64>,
    pub total_steps: u64,
}

impl LambdaSchedule {
    /// Auxiliary exits decay linearly from 1.0 to 0.1; the main exit stays at 1.0.
    pub fn default_for(n_exits: usize, total_steps: u64) -> Self {
        let mut initial = vec![1.0; n_exits];
        let mut final_weights = vec![0.1; n_exits];
        initial[n_exits - 1] = 1.0;
        final_weights[n_exits - 1] = 1.0;
        Self {
            kind: ScheduleKind::LinearDecay,
            initial,
            final_weights,
            total_steps,
        }
    }

    pub fn constant(weights: Vec<f64>) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            initial: weights.clone(),
            final_weights: weights,
            total_steps: 0,
        }
    }

    /// Weight one on a single exit, zero elsewhere.
    pub fn one_hot(n_exits: usize, branch: usize) -> Self {
        let mut w = vec![0.0; n_exits];
        w[branch] = 1.0;
        Self::constant(w)
    }

    pub fn validate(&self, n_exits: usize) -> Result<()> {
        if self.initial.len() != n_exits || self.final_weights.len() != n_exits {
            return Err(Error::Config(format!(
                "lambda schedule has {}/{} weights for {n_exits} exits",
                self.initial.len(),
                self.final_weights.len()
            )));
        }
        if self.initial.iter().chain(&self.final_weights).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("lambda weights must be finite and nonnegative".into()));
        }
        if self.kind != ScheduleKind::Constant {
            if self.initial[n_exits - 1] != self.final_weights[n_exits - 1] {
                return Err(Error::Config("the main exit's weight must not change over training".into()));
            }
            for k in 0..n_exits - 1 {
                if self.final_weights[k] > self.initial[k] {
                    return Err(Error::Config(format!("lambda for exit {k} increases under a decay schedule")));
                }
            }
        }
        Ok(())
    }

    /// Weights at `step`; steps past `total_steps` clamp to the final weights.
    pub fn lambda_at(&self, step: u64) -> Vec<f64> {
        let frac = if self.total_steps == 0 {
            1.0
        } else {
            step.min(self.total_steps) as f64 / self.total_steps as f64
        };
        let mix = |a: f64, b: f64| match self.kind {
            ScheduleKind::Constant => a,
            // Endpoint-exact form: gives a at 0 and b at the end.
            ScheduleKind::LinearDecay => (1.0 - frac) * a + frac * b,
            ScheduleKind::CosineDecay => b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        };
        self.initial.iter().zip(&self.final_weights).map(|(&a, &b)| mix(a, b)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip_norm: f64,
}

mod defaults {
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.95
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: 50,
            total_steps: 500,
            batch: 8,
            seq_len: 64,
            weight_decay: defaults::weight_decay(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            grad_clip_norm: defaults::grad_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if self.batch == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch must be >= 1 and seq_len >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Linear warm-up to `peak_lr`, then cosine decay to `0.1 · peak_lr` at
    /// `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        let progress = if span == 0 {
            if step == self.warmup_steps { 0.0 } else { 1.0 }
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        self.peak_lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Updates applied so far, for bias correction.
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub branch_losses: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    /// Set when the step ran with nothing trainable.
    pub all_frozen: bool,
}

pub struct TrainState {
    pub model: FamilialModel,
    pub moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeSummary {
    pub trainable: usize,
    pub frozen: usize,
}

impl FreezeSummary {
    pub fn all_frozen(&self) -> bool {
        self.trainable == 0
    }
}

/// Glob match with `*` wildcards, e.g. `backbone.*` or `exits.*.lm_proj`.
pub fn name_matches(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    let first = parts[0];
    if !rest.starts_with(first) {
        return false;
    }
    rest = &rest[first.len()..];
    let last = parts[parts.len() - 1];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    rest.ends_with(last)
}

impl FamilialModel {
    /// Freezes exactly the parameters the predicate accepts.
    pub fn set_freeze(&mut self, frozen: impl Fn(&str) -> bool) -> FreezeSummary {
        let names = self.param_names();
        self.frozen = names.iter().filter(|n| frozen(n)).cloned().collect();
        FreezeSummary {
            trainable: names.len() - self.frozen.len(),
            frozen: self.frozen.len(),
        }
    }
}

/// Per-branch losses and the gradient of `Σ λ_k L_k` for every trainable
/// parameter the loss reaches.
pub struct LossAndGrads {
    pub branch_losses: Vec<f64>,
    pub total: f64,
    pub grads: BTreeMap<String, Vec<f32>>,
}

/// Next-token targets: position `t` predicts `tokens[t + 1]`, the final
/// position and padding are ignored.
pub fn next_token_targets(tokens: &[Vec<u32>]) -> Vec<Option<usize>> {
    let mut targets = Vec::new();
    for row in tokens {
        for t in 0..row.len() {
            targets.push(row.get(t + 1).filter(|&&x| x != PAD).map(|&x| x as usize));
        }
    }
    targets
}

pub fn loss_and_grads(model: &FamilialModel, tokens: &[Vec<u32>], weights: &[f64]) -> Result<LossAndGrads> {
    if weights.len() != model.n_exits() {
        return Err(Error::Config(format!("{} weights for {} exits", weights.len(), model.n_exits())));
    }
    let targets = next_token_targets(tokens);
    let mut pass = ForwardPass::new(model, tokens, true)?;
    let logits = pass.all_branches()?;
    let mut losses = Vec::with_capacity(logits.len());
    for id in logits {
        losses.push(pass.graph.cross_entropy(id, targets.clone())?);
    }
    let total = pass.graph.weighted_sum(losses.clone(), weights.to_vec())?;
    let branch_losses: Vec<f64> = losses.iter().map(|&id| pass.graph.scalar(id)).collect();
    let total_value = pass.graph.scalar(total);
    let mut grads = BTreeMap::new();
    if pass.graph.requires_grad(total) {
        let mut g = pass.graph.backward(total)?;
        for (name, &id) in pass.param_nodes() {
            if let Some(v) = g.take(id) {
                grads.insert(name.clone(), v);
            }
        }
    }
    Ok(LossAndGrads {
        branch_losses,
        total: total_value,
        grads,
    })
}

impl TrainState {
    pub fn new(model: FamilialModel) -> Self {
        Self {
            model,
            moments: BTreeMap::new(),
            step: 0,
            metrics: Vec::new(),
        }
    }

    /// Updates the freeze mask and drops optimizer moments of frozen parameters.
    pub fn set_freeze(&mut self, frozen: impl Fn(&str) -> bool) -> FreezeSummary {
        let summary = self.model.set_freeze(frozen);
        let model = &self.model;
        self.moments.retain(|name, _| model.is_trainable(name));
        summary
    }

    /// One joint update. Uses `λ(step)` and the learning rate `lr(step + 1)`,
    /// so the first update after warm-up start is already nonzero.
    pub fn train_step(
        &mut self,
        tokens: &[Vec<u32>],
        cfg: &TrainConfig,
        schedule: &LambdaSchedule,
    ) -> Result<StepMetrics> {
        let step = self.step;
        let lambdas = schedule.lambda_at(step);
        let lr = cfg.lr_at(step + 1);
        let LossAndGrads {
            branch_losses,
            total,
            mut grads,
        } = loss_and_grads(&self.model, tokens, &lambdas)?;
        if !total.is_finite() || branch_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("branch losses {branch_losses:?}"),
            });
        }

        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite gradient norm".into(),
            });
        }
        let clip = (cfg.grad_clip_norm / (norm + 1e-6)).min(1.0) as f32;
        if clip < 1.0 {
            for g in grads.values_mut() {
                g.iter_mut().for_each(|v| *v *= clip);
            }
        }

        let all_frozen = self.model.param_names().iter().all(|n| !self.model.is_trainable(n));
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let eps = cfg.adam_eps as f32;
        let lr32 = lr as f32;
        let wd = cfg.weight_decay as f32;
        let moments = &mut self.moments;
        self.model.visit_mut(&mut |name, param| {
            let Some(g) = grads.get(&name) else { return };
            let entry = moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            entry.t += 1;
            let bc1 = (1.0 - cfg.beta1.powi(entry.t as i32)) as f32;
            let bc2 = (1.0 - cfg.beta2.powi(entry.t as i32)) as f32;
            let decay = if param.shape().len() == 2 { lr32 * wd } else { 0.0 };
            for (((w, &gi), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(entry.m.iter_mut())
                .zip(entry.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w -= lr32 * update + decay * *w;
            }
        });

        let metrics = StepMetrics {
            step,
            branch_losses,
            lambdas,
            lr,
            grad_norm: norm,
            all_frozen,
        };
        self.step += 1;
        self.metrics.push(metrics.clone());
        Ok(metrics)
    }
}

impl TrainState {
    /// Runs steps on the batcher's order until `self.step == end_step`.
    pub fn train_until(
        &mut self,
        data: &Batcher,
        cfg: &TrainConfig,
        schedule: &LambdaSchedule,
        end_step: u64,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<()> {
        while self.step < end_step {
            let batch = data.batch_at(self.step);
            let m = self.train_step(&batch, cfg, schedule)?;
            on_step(&m);
        }
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 6] = ["step", "branch", "loss", "lambda", "lr", "grad_norm"];

/// One row per branch per step; with `arm` set, an `arm` column comes first.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(Option<&str>, &StepMetrics)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let with_arm = rows.iter().any(|(a, _)| a.is_some());
    let mut header: Vec<&str> = Vec::new();
    if with_arm {
        header.push("arm");
    }
    header.extend(METRICS_HEADER);
    w.write_record(&header)?;
    for (arm, m) in rows {
        for (k, loss) in m.branch_losses.iter().enumerate() {
            let mut rec = Vec::with_capacity(7);
            if with_arm {
                rec.push(arm.unwrap_or("").to_string());
            }
            rec.push(m.step.to_string());
            rec.push(k.to_string());
            rec.push(loss.to_string());
            rec.push(m.lambdas[k].to_string());
            rec.push(m.lr.to_string());
            rec.push(m.grad_norm.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}
