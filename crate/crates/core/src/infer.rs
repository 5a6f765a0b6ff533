//! Confidence-thresholded early-exit decoding with per-layer KV caches.
//!
//! Every block runs one position at a time through the same row kernels as
//! the batched forward, so cached decoding reproduces full recomputation bit
//! for bit. A position that exits early leaves deeper layers uncomputed; they
//! are backfilled when a later token needs them (or right away with
//! [`Backfill::Always`]).

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{attend_row, rmsnorm_row, swiglu_row, RopeTable};
use crate::model::{BlockWeights, FamilialModel};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backfill {
    /// Compute skipped deeper layers only when a later token needs them.
    #[default]
    Lazy,
    /// Finish every position to full depth right after its token is chosen.
    Always,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitPolicy {
    pub threshold: f64,
    /// Exit indices that may emit; empty means all.
    #[serde(default)]
    pub allowed_exits: Vec<usize>,
    #[serde(default = "greedy")]
    pub mode: DecodeMode,
    #[serde(default)]
    pub backfill: Backfill,
}

fn greedy() -> DecodeMode {
    DecodeMode::Greedy
}

impl ExitPolicy {
    pub fn greedy(threshold: f64) -> Self {
        Self {
            threshold,
            allowed_exits: Vec::new(),
            mode: DecodeMode::Greedy,
            backfill: Backfill::Lazy,
        }
    }

    /// Allowed exits in increasing depth.
    pub fn exits(&self, model: &FamilialModel) -> Result<Vec<usize>> {
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold {} must be >= 0", self.threshold)));
        }
        if let DecodeMode::Sample { temperature, .. } = self.mode {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::Config(format!("temperature {temperature} must be positive")));
            }
        }
        let last = model.n_exits() - 1;
        if self.allowed_exits.is_empty() {
            return Ok((0..=last).collect());
        }
        let mut exits = self.allowed_exits.clone();
        exits.sort_unstable();
        exits.dedup();
        if exits.iter().any(|&k| k > last) || !exits.contains(&last) {
            return Err(Error::Config(format!(
                "allowed exits {:?} must be valid and include the final exit {last}",
                self.allowed_exits
            )));
        }
        Ok(exits)
    }
}

/// Largest softmax probability of a logit row.
pub fn confidence(logits: &[f32]) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("confidence needs a nonempty finite logit row".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    Ok(1.0 / sum)
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let w: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    argmax(logits)
}

#[derive(Clone, Debug, Default)]
struct Kv {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
}

/// One stack of blocks sharing a position axis: inputs per position and the
/// KV rows of every block.
#[derive(Clone, Debug)]
struct Stack {
    /// `hidden[l][p]` is the input of block `l` at position `p`;
    /// `hidden[n][p]` is the output of the last block.
    hidden: Vec<Vec<Vec<f32>>>,
    kv: Vec<Kv>,
}

impl Stack {
    fn new(blocks: usize) -> Self {
        Self {
            hidden: vec![Vec::new(); blocks + 1],
            kv: vec![Kv::default(); blocks],
        }
    }
}

/// Layer executions, split by whether they served the token being decoded
/// or filled in an earlier position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub backbone: usize,
    pub head: usize,
    pub backfill: usize,
}

pub struct Decoder<'m> {
    model: &'m FamilialModel,
    rope: RopeTable,
    tokens: Vec<u32>,
    backbone: Stack,
    heads: Vec<Stack>,
    counts: CallCounts,
    scratch_probs: Vec<f32>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m FamilialModel, prompt: &[u32]) -> Result<Self> {
        let cfg = &model.config;
        if prompt.is_empty() {
            return Err(Error::Input("prompt is empty".into()));
        }
        if prompt.len() > cfg.ctx_len {
            return Err(Error::Input(format!("prompt of {} tokens exceeds ctx_len {}", prompt.len(), cfg.ctx_len)));
        }
        let mut d = Self {
            model,
            rope: model.rope_table(),
            tokens: Vec::new(),
            backbone: Stack::new(cfg.n_layers),
            heads: model.exits.iter().map(|h| Stack::new(h.depth())).collect(),
            counts: CallCounts::default(),
            scratch_probs: vec![0.0; cfg.ctx_len],
        };
        for &t in prompt {
            d.push(t)?;
        }
        Ok(d)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn counts(&self) -> CallCounts {
        self.counts
    }

    /// Appends a token and its embedding; layers run on demand.
    pub fn push(&mut self, token: u32) -> Result<()> {
        if token as usize >= self.model.config.vocab {
            return Err(Error::Input(format!("token id {token} outside vocabulary")));
        }
        if self.tokens.len() >= self.model.config.ctx_len {
            return Err(Error::Input("context is full".into()));
        }
        self.tokens.push(token);
        self.backbone.hidden[0].push(self.model.embedding.row(token as usize).to_vec());
        Ok(())
    }

    fn current(&self) -> usize {
        self.tokens.len() - 1
    }

    fn run_block(&mut self, w: &BlockWeights, stack: StackRef, l: usize, pos: usize) {
        let cfg = &self.model.config;
        let (hd, hq, hkv) = (cfg.head_dim(), cfg.q_heads, cfg.kv_heads);
        let (d, kvd, ff) = (cfg.hidden, cfg.kv_dim(), cfg.ff_dim());
        let eps = cfg.rms_eps;
        let st = match stack {
            StackRef::Backbone => &mut self.backbone,
            StackRef::Head(k) => &mut self.heads[k],
        };
        let x = &st.hidden[l][pos];
        debug_assert_eq!(st.kv[l].len, pos);

        let mut a = vec![0f32; d];
        rmsnorm_row(x, w.attn_norm.data(), eps, &mut a);
        let mut q = vec![0f32; d];
        let mut k = vec![0f32; kvd];
        let mut v = vec![0f32; kvd];
        w.wq.apply_row(&a, &mut q);
        w.wk.apply_row(&a, &mut k);
        w.wv.apply_row(&a, &mut v);
        self.rope.rotate(&mut q, pos);
        self.rope.rotate(&mut k, pos);
        let kv = &mut st.kv[l];
        kv.keys.extend_from_slice(&k);
        kv.values.extend_from_slice(&v);
        kv.len += 1;

        let group = hq / hkv;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut att = vec![0f32; d];
        for h in 0..hq {
            attend_row(
                &q[h * hd..(h + 1) * hd],
                &kv.keys,
                &kv.values,
                kvd,
                (h / group) * hd,
                pos,
                scale,
                &mut self.scratch_probs[..=pos],
                &mut att[h * hd..(h + 1) * hd],
            );
        }
        let mut o = vec![0f32; d];
        w.wo.apply_row(&att, &mut o);
        let h1: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

        let mut m = vec![0f32; d];
        rmsnorm_row(&h1, w.mlp_norm.data(), eps, &mut m);
        let mut gate = vec![0f32; ff];
        let mut up = vec![0f32; ff];
        w.w_gate.apply_row(&m, &mut gate);
        w.w_up.apply_row(&m, &mut up);
        let mut act = vec![0f32; ff];
        swiglu_row(&gate, &up, &mut act);
        let mut down = vec![0f32; d];
        w.w_down.apply_row(&act, &mut down);
        let out: Vec<f32> = h1.iter().zip(&down).map(|(a, b)| a + b).collect();
        st.hidden[l + 1].push(out);

        let current = self.tokens.len() - 1;
        if pos != current {
            self.counts.backfill += 1;
        } else if matches!(stack, StackRef::Backbone) {
            self.counts.backbone += 1;
        } else {
            self.counts.head += 1;
        }
    }

    /// Runs backbone layers `0..depth` for every position up to `upto`.
    fn ensure_backbone(&mut self, depth: usize, upto: usize) {
        let model = self.model;
        for l in 0..depth {
            while self.backbone.kv[l].len <= upto {
                let pos = self.backbone.kv[l].len;
                self.run_block(&model.backbone[l], StackRef::Backbone, l, pos);
            }
        }
    }

    fn ensure_head(&mut self, k: usize, upto: usize) {
        let model = self.model;
        let depth = model.config.exit_depths[k];
        self.ensure_backbone(depth, upto);
        let head = &model.exits[k];
        while self.heads[k].hidden[0].len() <= upto {
            let p = self.heads[k].hidden[0].len();
            let h = self.backbone.hidden[depth][p].clone();
            self.heads[k].hidden[0].push(h);
        }
        for (j, w) in head.all_blocks().enumerate() {
            while self.heads[k].kv[j].len <= upto {
                let pos = self.heads[k].kv[j].len;
                self.run_block(w, StackRef::Head(k), j, pos);
            }
        }
    }

    /// Logits of exit `k` at the newest position.
    pub fn exit_logits(&mut self, k: usize) -> Result<Vec<f32>> {
        self.model.check_branch(k)?;
        let pos = self.current();
        self.ensure_head(k, pos);
        let head = &self.model.exits[k];
        let h = &self.heads[k].hidden[head.depth()][pos];
        let mut n = vec![0f32; h.len()];
        rmsnorm_row(h, head.final_norm.data(), self.model.config.rms_eps, &mut n);
        let mut logits = vec![0f32; self.model.config.vocab];
        head.lm_proj.apply_row(&n, &mut logits);
        Ok(logits)
    }

    /// Completes the newest position through the whole backbone and the
    /// given heads.
    pub fn backfill_current(&mut self, exits: &[usize]) {
        let pos = self.current();
        self.ensure_backbone(self.model.config.n_layers, pos);
        for &k in exits {
            self.ensure_head(k, pos);
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum StackRef {
    Backbone,
    Head(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub token_id: u32,
    pub exit_depth: usize,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub prompt: Vec<u32>,
    pub records: Vec<TraceRecord>,
    /// Exit index chosen for each token.
    pub exits: Vec<usize>,
    /// Per token: backbone and head layers run for its own position.
    pub token_calls: Vec<CallCounts>,
    pub counts: CallCounts,
    /// Set when the context filled up before `max_new` tokens.
    pub truncated: bool,
}

impl GenerationTrace {
    pub fn tokens(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.token_id).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(out, "{line}").map_err(|e| Error::io("trace", e))?;
        }
        Ok(())
    }
}

/// Decodes up to `max_new` tokens, emitting each from the shallowest allowed
/// exit whose confidence reaches the threshold, else from the final exit.
pub fn generate(model: &FamilialModel, prompt: &[u32], policy: &ExitPolicy, max_new: usize) -> Result<GenerationTrace> {
    let exits = policy.exits(model)?;
    let mut dec = Decoder::new(model, prompt)?;
    let mut rng = match policy.mode {
        DecodeMode::Sample { seed, .. } => Some(SeedStream::new(seed).split("sample").rng()),
        DecodeMode::Greedy => None,
    };
    let mut trace = GenerationTrace {
        prompt: prompt.to_vec(),
        records: Vec::new(),
        exits: Vec::new(),
        token_calls: Vec::new(),
        counts: CallCounts::default(),
        truncated: false,
    };
    for step in 0..max_new {
        let before = dec.counts();
        let mut confidences = Vec::with_capacity(exits.len());
        let mut chosen = None;
        for (i, &k) in exits.iter().enumerate() {
            let logits = dec.exit_logits(k)?;
            let c = confidence(&logits)?;
            confidences.push(c);
            if c >= policy.threshold || i + 1 == exits.len() {
                chosen = Some((k, logits));
                break;
            }
        }
        let (k, logits) = chosen.expect("final exit always chooses");
        let token = match (policy.mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) => sample(&logits, temperature, rng),
            _ => argmax(&logits),
        } as u32;
        if policy.backfill == Backfill::Always {
            dec.backfill_current(&exits);
        }
        let after = dec.counts();
        trace.token_calls.push(CallCounts {
            backbone: after.backbone - before.backbone,
            head: after.head - before.head,
            backfill: after.backfill - before.backfill,
        });
        trace.records.push(TraceRecord {
            step,
            token_id: token,
            exit_depth: model.config.exit_depths[k],
            confidences,
        });
        trace.exits.push(k);
        if step + 1 == max_new {
            break;
        }
        if dec.tokens().len() >= model.config.ctx_len {
            trace.truncated = true;
            break;
        }
        dec.push(token)?;
    }
    trace.counts = dec.counts();
    Ok(trace)
}

/// Full-recompute greedy decoding from one exit, the reference for cached
/// decoding.
pub fn greedy_reference(model: &FamilialModel, prompt: &[u32], branch: usize, max_new: usize) -> Result<Vec<u32>> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = model.forward_branch(&[ctx.clone()], branch)?;
        let v = logits.shape()[2];
        let last = &logits.data()[(ctx.len() - 1) * v..ctx.len() * v];
        let t = argmax(last) as u32;
        out.push(t);
        if ctx.len() >= model.config.ctx_len {
            break;
        }
        ctx.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub mean_depth: f64,
}

pub fn exit_histogram(depths: &[usize]) -> Result<ExitHistogram> {
    if depths.is_empty() {
        return Err(Error::Input("exit histogram of an empty trace".into()));
    }
    let mut counts = BTreeMap::new();
    for &d in depths {
        *counts.entry(d).or_insert(0) += 1;
    }
    let mean_depth = depths.iter().sum::<usize>() as f64 / depths.len() as f64;
    Ok(ExitHistogram { counts, mean_depth })
}

impl GenerationTrace {
    pub fn histogram(&self) -> Result<ExitHistogram> {
        exit_histogram(&self.records.iter().map(|r| r.exit_depth).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FamilyConfig;

    fn model() -> FamilialModel {
        FamilialModel::init(FamilyConfig::desk(), 31).unwrap()
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.5; 4]).unwrap(), 0.25);
        assert!((confidence(&[0.0, 1000.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(confidence(&[f32::NAN]).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn histogram_examples() {
        let h = exit_histogram(&[2, 4, 2, 4]).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(2, 2), (4, 2)]));
        assert_eq!(h.mean_depth, 3.0);
        assert!(exit_histogram(&[]).is_err());
    }

    #[test]
    fn cached_logits_equal_full_forward() {
        let m = model();
        let seq: Vec<u32> = (0..20).map(|i| (i * 31 % 256) as u32).collect();
        let full = m.forward_all_branches(&[seq.clone()]).unwrap();
        let mut dec = Decoder::new(&m, &seq[..1]).unwrap();
        for p in 0..seq.len() {
            if p > 0 {
                dec.push(seq[p]).unwrap();
            }
            // Alternate which exit is asked for so deeper layers lag behind.
            let ks: &[usize] = if p % 3 == 0 { &[1, 0] } else { &[0] };
            for &k in ks {
                let row = dec.exit_logits(k).unwrap();
                let v = full[k].shape()[2];
                assert_eq!(row, full[k].data()[p * v..(p + 1) * v].to_vec(), "exit {k} pos {p}");
            }
        }
    }

    #[test]
    fn extremes() {
        let m = model();
        let prompt = vec![65u32, 32, 102, 111, 120];
        let t0 = generate(&m, &prompt, &ExitPolicy::greedy(0.0), 12).unwrap();
        assert!(t0.exits.iter().all(|&k| k == 0));
        let hi = generate(&m, &prompt, &ExitPolicy::greedy(1.5), 12).unwrap();
        assert!(hi.exits.iter().all(|&k| k == 1));
        assert_eq!(hi.tokens(), greedy_reference(&m, &prompt, 1, 12).unwrap());
        assert_eq!(t0.tokens(), greedy_reference(&m, &prompt, 0, 12).unwrap());
    }

    #[test]
    fn backfill_modes_agree_on_tokens() {
        let m = model();
        let prompt = vec![1u32, 2, 3];
        let mut p = ExitPolicy::greedy(0.004);
        let lazy = generate(&m, &prompt, &p, 16).unwrap();
        p.backfill = Backfill::Always;
        let always = generate(&m, &prompt, &p, 16).unwrap();
        assert_eq!(lazy.records, always.records);
        for (calls, &k) in lazy.token_calls.iter().zip(&lazy.exits) {
            assert!(calls.backbone <= m.config.exit_depths[k]);
        }
    }

    #[test]
    fn truncation_and_sampling() {
        let m = model();
        let prompt: Vec<u32> = vec![7; 60];
        let t = generate(&m, &prompt, &ExitPolicy::greedy(2.0), 10).unwrap();
        assert!(t.truncated);
        assert_eq!(t.records.len(), 5);
        let mut p = ExitPolicy::greedy(0.5);
        p.mode = DecodeMode::Sample { temperature: 0.8, seed: 3 };
        let a = generate(&m, &[5, 6], &p, 8).unwrap();
        let b = generate(&m, &[5, 6], &p, 8).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"step\":0,\"token_id\":"));
    }
}
