//! Block expansion: appends zero-residual blocks to one exit head so the
//! expanded family starts as an exact copy of the original.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batcher;
use crate::error::{Error, Result};
use crate::model::{BlockWeights, FamilialModel, ForwardPass, Linear};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use crate::tokenizer::ByteTokenizer;
use crate::train::{LambdaSchedule, StepMetrics, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Randomized,
    Clone,
}

impl InitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitMode::Randomized => "randomized",
            InitMode::Clone => "clone",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSpec {
    pub target_branch: usize,
    #[serde(default = "default_new_blocks")]
    pub n_new_blocks: usize,
    #[serde(default = "default_init_mode")]
    pub init_mode: InitMode,
    /// Block index along the target branch's path (backbone layers, then head
    /// blocks). Defaults to the last block before the new ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone_source: Option<usize>,
    #[serde(default = "default_std")]
    pub gaussian_std: f64,
    /// Falls back to the model's seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_new_blocks() -> usize {
    3
}

fn default_init_mode() -> InitMode {
    InitMode::Randomized
}

fn default_std() -> f64 {
    0.02
}

impl ExpansionSpec {
    pub fn new(target_branch: usize) -> Self {
        Self {
            target_branch,
            n_new_blocks: default_new_blocks(),
            init_mode: default_init_mode(),
            clone_source: None,
            gaussian_std: default_std(),
            seed: None,
        }
    }

    fn validate(&self, model: &FamilialModel) -> Result<()> {
        if self.n_new_blocks == 0 {
            return Err(Error::Config("n_new_blocks must be at least 1".into()));
        }
        if self.target_branch >= model.n_exits() {
            return Err(Error::Config(format!(
                "target_branch {} but the family has {} exits",
                self.target_branch,
                model.n_exits()
            )));
        }
        if !(self.gaussian_std >= 0.0) || !self.gaussian_std.is_finite() {
            return Err(Error::Config("gaussian_std must be finite and nonnegative".into()));
        }
        if let Some(src) = self.clone_source {
            let len = branch_path_len(model, self.target_branch);
            if src >= len {
                return Err(Error::Config(format!("clone_source {src} outside the branch's {len} blocks")));
            }
        }
        Ok(())
    }
}

fn branch_path_len(model: &FamilialModel, branch: usize) -> usize {
    model.config.exit_depths[branch] + model.exits[branch].depth()
}

fn branch_path_block(model: &FamilialModel, branch: usize, index: usize) -> &BlockWeights {
    let depth = model.config.exit_depths[branch];
    if index < depth {
        &model.backbone[index]
    } else {
        model.exits[branch].all_blocks().nth(index - depth).expect("index checked")
    }
}

fn zero_output(b: &mut BlockWeights) {
    for name in ["wo", "w_down"] {
        let lin = b.matrix_mut(name).unwrap();
        *lin = Linear::Dense(Tensor::zeros(&[lin.out_dim(), lin.in_dim()]));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub target_branch: usize,
    pub init_mode: InitMode,
    pub n_new_blocks: usize,
    pub branch_depth_before: usize,
    pub branch_depth_after: usize,
    pub added_params: usize,
    /// Largest logit difference from the original family on a probe batch,
    /// measured before any training.
    pub identity_deviation: f64,
    pub trainable: Vec<String>,
    pub frozen_count: usize,
}

/// Appends the new blocks after the target head's existing blocks and
/// freezes everything except them and the target's output projection.
pub fn expand(model: &FamilialModel, spec: &ExpansionSpec) -> Result<(FamilialModel, ExpansionReport)> {
    spec.validate(model)?;
    let k = spec.target_branch;
    let mut out = model.clone();
    let n_exits = model.n_exits();
    if out.config.expanded_blocks.is_empty() {
        out.config.expanded_blocks = vec![0; n_exits];
    }
    let existing = out.config.expanded_blocks[k];
    out.config.expanded_blocks[k] += spec.n_new_blocks;

    let stream = SeedStream::new(spec.seed.unwrap_or(model.seed)).split("expand");
    let source = spec.clone_source.unwrap_or(branch_path_len(model, k) - 1);
    let mut new_names = Vec::new();
    for j in existing..existing + spec.n_new_blocks {
        let prefix = format!("exits.{k}.expanded.{j}");
        let mut block = match spec.init_mode {
            InitMode::Randomized => BlockWeights::gaussian(&out.config, stream, &prefix, spec.gaussian_std),
            InitMode::Clone => branch_path_block(model, k, source).clone(),
        };
        zero_output(&mut block);
        out.exits[k].expanded.push(block);
        new_names.push(prefix);
    }

    let lm = format!("exits.{k}.lm_proj");
    let trainable_name = |n: &str| {
        n == lm
            || n.strip_prefix(&lm).is_some_and(|r| r == ".A" || r == ".B")
            || new_names.iter().any(|p| n.strip_prefix(p.as_str()).is_some_and(|r| r.starts_with('.')))
    };
    let summary = out.set_freeze(|n| !trainable_name(n));
    let trainable: Vec<String> = out.param_names().into_iter().filter(|n| out.is_trainable(n)).collect();

    let probe = probe_batch(model, stream.split("probe"));
    let identity_deviation = verify_identity(model, &out, &probe)?;
    let report = ExpansionReport {
        target_branch: k,
        init_mode: spec.init_mode,
        n_new_blocks: spec.n_new_blocks,
        branch_depth_before: branch_path_len(model, k),
        branch_depth_after: branch_path_len(&out, k),
        added_params: out.param_count().total - model.param_count().total,
        identity_deviation,
        trainable,
        frozen_count: summary.frozen,
    };
    Ok((out, report))
}

/// Four random byte sequences, long enough to exercise attention.
pub fn probe_batch(model: &FamilialModel, stream: SeedStream) -> Vec<Vec<u32>> {
    let mut rng = stream.rng();
    let len = model.config.ctx_len.min(32);
    let vocab = model.config.vocab.min(256) as u32;
    (0..4).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect()
}

/// Maximum absolute logit difference between two families over every exit.
pub fn verify_identity(base: &FamilialModel, expanded: &FamilialModel, probe: &[Vec<u32>]) -> Result<f64> {
    if base.config.vocab != expanded.config.vocab || base.n_exits() != expanded.n_exits() {
        return Err(Error::Config(format!(
            "cannot compare families: vocab {} vs {}, exits {} vs {}",
            base.config.vocab,
            expanded.config.vocab,
            base.n_exits(),
            expanded.n_exits()
        )));
    }
    let a = base.forward_all_branches(probe)?;
    let b = expanded.forward_all_branches(probe)?;
    let mut worst = 0f64;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            let d = (*p as f64 - *q as f64).abs();
            if !d.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineMap {
    pub layers: Vec<String>,
    pub tokens: Vec<u32>,
    /// `scores[layer][token]`.
    pub scores: Vec<Vec<f64>>,
    /// Set when some hidden vector had zero norm and its score was emitted as 0.
    pub degenerate: bool,
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    // sqrt(aa·aa) is exactly aa, so identical vectors score exactly 1.
    Some((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine between each block's input and output hidden state, per token,
/// along the path of `branch`.
pub fn layer_cosine_similarity(model: &FamilialModel, tokens: &[u32], branch: usize) -> Result<CosineMap> {
    model.check_branch(branch)?;
    if tokens.is_empty() {
        return Err(Error::Input("cosine similarity needs a nonempty text".into()));
    }
    let batch = [tokens.to_vec()];
    let mut pass = ForwardPass::new(model, &batch, false)?.with_block_trace();
    let h = pass.backbone_to(model.config.exit_depths[branch])?;
    pass.head_hidden(h, branch)?;
    let mut degenerate = false;
    let mut layers = Vec::new();
    let mut scores = Vec::new();
    for (name, input, output) in pass.block_trace() {
        let row: Vec<f64> = (0..tokens.len())
            .map(|t| {
                cosine(input.row(t), output.row(t)).unwrap_or_else(|| {
                    degenerate = true;
                    0.0
                })
            })
            .collect();
        layers.push(name);
        scores.push(row);
    }
    Ok(CosineMap {
        layers,
        tokens: tokens.to_vec(),
        scores,
        degenerate,
    })
}

pub fn write_cosine_csv<W: Write>(out: W, map: &CosineMap) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["layer", "token_index", "token_text", "cosine"])?;
    for (layer, row) in map.layers.iter().zip(&map.scores) {
        for (t, score) in row.iter().enumerate() {
            w.write_record([
                layer.clone(),
                t.to_string(),
                ByteTokenizer.token_text(map.tokens[t]),
                score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("cosine csv", e))?;
    Ok(())
}

/// Loss traces of the two initialization arms, trained on identical data.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub randomized: Vec<StepMetrics>,
    pub clone: Vec<StepMetrics>,
}

impl Ablation {
    pub fn rows(&self) -> Vec<(Option<&str>, &StepMetrics)> {
        let r = self.randomized.iter().map(|m| (Some("randomized"), m));
        let c = self.clone.iter().map(|m| (Some("clone"), m));
        r.chain(c).collect()
    }
}

/// Expands with each init mode and trains only the target exit for `steps`.
pub fn ablation_run(
    model: &FamilialModel,
    spec: &ExpansionSpec,
    data: &Batcher,
    cfg: &TrainConfig,
    steps: u64,
) -> Result<Ablation> {
    let mut traces = Vec::with_capacity(2);
    for mode in [InitMode::Randomized, InitMode::Clone] {
        let arm = ExpansionSpec {
            init_mode: mode,
            ..spec.clone()
        };
        let (expanded, _) = expand(model, &arm)?;
        let schedule = LambdaSchedule::one_hot(expanded.n_exits(), spec.target_branch);
        let mut state = TrainState::new(expanded);
        state.train_until(data, cfg, &schedule, steps, |_| {})?;
        traces.push(state.metrics);
    }
    let clone = traces.pop().unwrap();
    let randomized = traces.pop().unwrap();
    Ok(Ablation { randomized, clone })
}
