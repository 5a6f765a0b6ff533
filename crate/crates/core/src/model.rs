//! The shared-backbone, multi-exit decoder.
//!
//! A family is one stack of `n_layers` pre-norm GQA blocks with exit heads
//! attached after selected depths. Each exit head owns its own decoder blocks
//! (optionally followed by expansion blocks), a final RMSNorm and an untied
//! vocabulary projection. Sub-models are prefixes of the backbone plus one
//! head; inside a family they read the same backbone tensors.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AttentionShape, Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::RopeTable;
use crate::rng::{Gaussian, SeedStream};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Projection matrices of one block, in canonical order.
pub const MATRIX_NAMES: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub ctx_len: usize,
    pub exit_depths: Vec<usize>,
    /// Decoder blocks owned by every exit head.
    pub branch_blocks: usize,
    pub mlp_mult: f64,
    pub rms_eps: f64,
    pub rope_base: f64,
    /// Blocks appended to each exit head by block expansion; empty means none.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expanded_blocks: Vec<usize>,
}

impl FamilyConfig {
    /// Smallest family that still exercises sharing, GQA grouping and nesting.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            hidden: 32,
            q_heads: 4,
            kv_heads: 2,
            vocab: 259,
            ctx_len: 64,
            exit_depths: vec![2, 4],
            branch_blocks: 1,
            mlp_mult: 4.0,
            rms_eps: 1e-6,
            rope_base: 10000.0,
            expanded_blocks: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.q_heads == 0 || self.kv_heads == 0 || self.q_heads % self.kv_heads != 0 {
            return bad(format!(
                "q_heads ({}) must be a positive multiple of kv_heads ({})",
                self.q_heads, self.kv_heads
            ));
        }
        if self.hidden == 0 || self.hidden % self.q_heads != 0 {
            return bad(format!("hidden ({}) must be divisible by q_heads ({})", self.hidden, self.q_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2".into());
        }
        if self.ctx_len < 1 {
            return bad("ctx_len must be at least 1".into());
        }
        if self.exit_depths.is_empty() || *self.exit_depths.last().unwrap() != self.n_layers {
            return bad(format!("exit_depths {:?} must end at n_layers = {}", self.exit_depths, self.n_layers));
        }
        if !self.exit_depths.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("exit_depths {:?} must be strictly increasing", self.exit_depths));
        }
        // Depth zero is only meaningful for the degenerate embedding-only family.
        if self.exit_depths[0] < 1 && self.n_layers > 0 {
            return bad("the shallowest exit must sit after at least one layer".into());
        }
        if !(self.mlp_mult > 0.0) || self.ff_dim() == 0 {
            return bad(format!("mlp_mult {} gives an empty MLP", self.mlp_mult));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 1.0) {
            return bad("rms_eps must be > 0 and rope_base > 1".into());
        }
        if !self.expanded_blocks.is_empty() && self.expanded_blocks.len() != self.exit_depths.len() {
            return bad("expanded_blocks needs one entry per exit".into());
        }
        Ok(())
    }

    pub fn n_exits(&self) -> usize {
        self.exit_depths.len()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.q_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    pub fn ff_dim(&self) -> usize {
        (self.mlp_mult * self.hidden as f64).round() as usize
    }

    pub fn expanded(&self, exit: usize) -> usize {
        self.expanded_blocks.get(exit).copied().unwrap_or(0)
    }

    /// Config of the standalone model holding exit `branch` and the
    /// backbone prefix under it.
    pub fn submodel(&self, branch: usize) -> FamilyConfig {
        let depth = self.exit_depths[branch];
        let mut config = self.clone();
        config.n_layers = depth;
        config.exit_depths = vec![depth];
        config.expanded_blocks = if self.expanded(branch) > 0 {
            vec![self.expanded(branch)]
        } else {
            Vec::new()
        };
        config
    }

    /// Short content hash used to detect config/checkpoint mismatches.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A projection `y = W x`. Factored form stores `W ≈ A · B` and applies
/// `A · (B · x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(Tensor),
    Factored { a: Tensor, b: Tensor },
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.shape()[0],
            Linear::Factored { a, .. } => a.shape()[0],
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.shape()[1],
            Linear::Factored { b, .. } => b.shape()[1],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(w) => w.numel(),
            Linear::Factored { a, b } => a.numel() + b.numel(),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, Linear::Factored { .. })
    }

    /// The dense matrix this projection applies (multiplied out if factored).
    pub fn dense(&self) -> Tensor {
        match self {
            Linear::Dense(w) => w.clone(),
            Linear::Factored { a, b } => crate::tensor::matmul(a, b).expect("factor shapes agree"),
        }
    }

    pub fn apply_row(&self, x: &[f32], out: &mut [f32]) {
        match self {
            Linear::Dense(w) => crate::kernels::linear_row(x, w.data(), out),
            Linear::Factored { a, b } => {
                let mut mid = vec![0f32; b.shape()[0]];
                crate::kernels::linear_row(x, b.data(), &mut mid);
                crate::kernels::linear_row(&mid, a.data(), out);
            }
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Linear::Dense(w) => f(name.to_string(), w),
            Linear::Factored { a, b } => {
                f(format!("{name}.A"), a);
                f(format!("{name}.B"), b);
            }
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Linear::Dense(w) => f(name.to_string(), w),
            Linear::Factored { a, b } => {
                f(format!("{name}.A"), a);
                f(format!("{name}.B"), b);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

impl BlockWeights {
    pub fn zeros(cfg: &FamilyConfig) -> Self {
        let (d, kv, ff) = (cfg.hidden, cfg.kv_dim(), cfg.ff_dim());
        let z = |o: usize, i: usize| Linear::Dense(Tensor::zeros(&[o, i]));
        Self {
            wq: z(d, d),
            wk: z(kv, d),
            wv: z(kv, d),
            wo: z(d, d),
            w_gate: z(ff, d),
            w_up: z(ff, d),
            w_down: z(d, ff),
            attn_norm: Tensor::ones(&[d]),
            mlp_norm: Tensor::ones(&[d]),
        }
    }

    /// Gaussian projections, unit norm gains. Each matrix draws from its own
    /// stream keyed by `prefix`.
    pub fn gaussian(cfg: &FamilyConfig, stream: SeedStream, prefix: &str, std: f64) -> Self {
        let mut b = Self::zeros(cfg);
        for name in MATRIX_NAMES {
            let mut g = Gaussian::new(stream.split(&format!("{prefix}.{name}")));
            if let Linear::Dense(w) = b.matrix_mut(name).unwrap() {
                g.fill(std, w.data_mut());
            }
        }
        b
    }

    pub fn matrix(&self, name: &str) -> Option<&Linear> {
        Some(match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            _ => return None,
        })
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut Linear> {
        Some(match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w_gate" => &mut self.w_gate,
            "w_up" => &mut self.w_up,
            "w_down" => &mut self.w_down,
            _ => return None,
        })
    }

    pub fn param_count(&self) -> usize {
        MATRIX_NAMES.iter().map(|n| self.matrix(n).unwrap().param_count()).sum::<usize>()
            + self.attn_norm.numel()
            + self.mlp_norm.numel()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for name in MATRIX_NAMES {
            self.matrix(name).unwrap().visit(&format!("{prefix}.{name}"), f);
        }
        f(format!("{prefix}.attn_norm"), &self.attn_norm);
        f(format!("{prefix}.mlp_norm"), &self.mlp_norm);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for name in MATRIX_NAMES {
            self.matrix_mut(name).unwrap().visit_mut(&format!("{prefix}.{name}"), f);
        }
        f(format!("{prefix}.attn_norm"), &mut self.attn_norm);
        f(format!("{prefix}.mlp_norm"), &mut self.mlp_norm);
    }
}

/// Closed-form size of one dense block.
pub fn block_param_count(cfg: &FamilyConfig) -> usize {
    let (d, kv, ff) = (cfg.hidden, cfg.kv_dim(), cfg.ff_dim());
    2 * d * d + 2 * kv * d + 3 * d * ff + 2 * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitHead {
    pub blocks: Vec<BlockWeights>,
    /// Zero-residual blocks appended after `blocks`.
    pub expanded: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub lm_proj: Linear,
}

impl ExitHead {
    pub fn all_blocks(&self) -> impl Iterator<Item = &BlockWeights> {
        self.blocks.iter().chain(self.expanded.iter())
    }

    pub fn depth(&self) -> usize {
        self.blocks.len() + self.expanded.len()
    }

    pub fn param_count(&self) -> usize {
        self.all_blocks().map(BlockWeights::param_count).sum::<usize>()
            + self.final_norm.numel()
            + self.lm_proj.param_count()
    }

    /// Parameter name prefix of head block `j` (expanded blocks continue the
    /// numbering under their own namespace).
    pub fn block_prefix(&self, exit: usize, j: usize) -> String {
        if j < self.blocks.len() {
            format!("exits.{exit}.blocks.{j}")
        } else {
            format!("exits.{exit}.expanded.{}", j - self.blocks.len())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub embedding: usize,
    pub backbone: usize,
    pub exits: Vec<usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilialModel {
    pub config: FamilyConfig,
    pub embedding: Tensor,
    pub backbone: Vec<BlockWeights>,
    pub exits: Vec<ExitHead>,
    /// Names of parameters excluded from optimization.
    pub frozen: BTreeSet<String>,
    pub seed: u64,
}

impl FamilialModel {
    /// Gaussian(0, 0.02²) projections, unit gains. Branch blocks of exit `k`
    /// start as copies of the backbone layer right after the exit, when that
    /// layer exists.
    pub fn init(config: FamilyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeedStream::new(seed);
        let mut embedding = Tensor::zeros(&[config.vocab, config.hidden]);
        Gaussian::new(root.split("embedding")).fill(INIT_STD, embedding.data_mut());
        let backbone: Vec<BlockWeights> = (0..config.n_layers)
            .map(|i| BlockWeights::gaussian(&config, root, &format!("backbone.{i}"), INIT_STD))
            .collect();
        let mut exits = Vec::with_capacity(config.n_exits());
        for (k, &depth) in config.exit_depths.iter().enumerate() {
            let blocks = (0..config.branch_blocks)
                .map(|j| match backbone.get(depth + j) {
                    Some(b) => b.clone(),
                    None => BlockWeights::gaussian(&config, root, &format!("exits.{k}.blocks.{j}"), INIT_STD),
                })
                .collect();
            let expanded = (0..config.expanded(k))
                .map(|j| BlockWeights::gaussian(&config, root, &format!("exits.{k}.expanded.{j}"), INIT_STD))
                .collect();
            let mut lm = Tensor::zeros(&[config.vocab, config.hidden]);
            Gaussian::new(root.split(&format!("exits.{k}.lm_proj"))).fill(INIT_STD, lm.data_mut());
            exits.push(ExitHead {
                blocks,
                expanded,
                final_norm: Tensor::ones(&[config.hidden]),
                lm_proj: Linear::Dense(lm),
            });
        }
        Ok(Self {
            config,
            embedding,
            backbone,
            exits,
            frozen: BTreeSet::new(),
            seed,
        })
    }

    /// Model with the config's shapes and every tensor zero (gains one).
    pub fn skeleton(config: FamilyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let exits = (0..config.n_exits())
            .map(|k| ExitHead {
                blocks: (0..config.branch_blocks).map(|_| BlockWeights::zeros(&config)).collect(),
                expanded: (0..config.expanded(k)).map(|_| BlockWeights::zeros(&config)).collect(),
                final_norm: Tensor::ones(&[config.hidden]),
                lm_proj: Linear::Dense(Tensor::zeros(&[config.vocab, config.hidden])),
            })
            .collect();
        Ok(Self {
            embedding: Tensor::zeros(&[config.vocab, config.hidden]),
            backbone: (0..config.n_layers).map(|_| BlockWeights::zeros(&config)).collect(),
            exits,
            frozen: BTreeSet::new(),
            seed,
            config,
        })
    }

    pub fn n_exits(&self) -> usize {
        self.exits.len()
    }

    /// Every parameter in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embedding".into(), &self.embedding);
        for (i, b) in self.backbone.iter().enumerate() {
            b.visit(&format!("backbone.{i}"), f);
        }
        for (k, head) in self.exits.iter().enumerate() {
            for j in 0..head.depth() {
                let block = if j < head.blocks.len() { &head.blocks[j] } else { &head.expanded[j - head.blocks.len()] };
                block.visit(&head.block_prefix(k, j), f);
            }
            f(format!("exits.{k}.final_norm"), &head.final_norm);
            head.lm_proj.visit(&format!("exits.{k}.lm_proj"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embedding".into(), &mut self.embedding);
        for (i, b) in self.backbone.iter_mut().enumerate() {
            b.visit_mut(&format!("backbone.{i}"), f);
        }
        for (k, head) in self.exits.iter_mut().enumerate() {
            for (j, b) in head.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("exits.{k}.blocks.{j}"), f);
            }
            for (j, b) in head.expanded.iter_mut().enumerate() {
                b.visit_mut(&format!("exits.{k}.expanded.{j}"), f);
            }
            f(format!("exits.{k}.final_norm"), &mut head.final_norm);
            head.lm_proj.visit_mut(&format!("exits.{k}.lm_proj"), f);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    fn block_mut(&mut self, parts: &[&str]) -> Option<(&mut BlockWeights, usize)> {
        match parts {
            ["backbone", i, ..] => Some((self.backbone.get_mut(i.parse::<usize>().ok()?)?, 2)),
            ["exits", k, "blocks", j, ..] => {
                let head = self.exits.get_mut(k.parse::<usize>().ok()?)?;
                Some((head.blocks.get_mut(j.parse::<usize>().ok()?)?, 4))
            }
            ["exits", k, "expanded", j, ..] => {
                let head = self.exits.get_mut(k.parse::<usize>().ok()?)?;
                Some((head.expanded.get_mut(j.parse::<usize>().ok()?)?, 4))
            }
            _ => None,
        }
    }

    /// Projection by base name, e.g. `exits.0.expanded.1.wo` or `exits.0.lm_proj`.
    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Linear> {
        let parts: Vec<&str> = name.split('.').collect();
        if let ["exits", k, "lm_proj"] = parts.as_slice() {
            return Some(&mut self.exits.get_mut(k.parse::<usize>().ok()?)?.lm_proj);
        }
        let (block, used) = self.block_mut(&parts)?;
        match &parts[used..] {
            [m] => block.matrix_mut(m),
            _ => None,
        }
    }

    pub fn linear(&self, name: &str) -> Option<&Linear> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["exits", k, "lm_proj"] => Some(&self.exits.get(k.parse::<usize>().ok()?)?.lm_proj),
            ["backbone", i, m] => self.backbone.get(i.parse::<usize>().ok()?)?.matrix(m),
            ["exits", k, "blocks", j, m] => self.exits.get(k.parse::<usize>().ok()?)?.blocks.get(j.parse::<usize>().ok()?)?.matrix(m),
            ["exits", k, "expanded", j, m] => self.exits.get(k.parse::<usize>().ok()?)?.expanded.get(j.parse::<usize>().ok()?)?.matrix(m),
            _ => None,
        }
    }

    /// Every projection's base name (factored ones without the `.A`/`.B` suffix).
    pub fn linear_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in self.backbone.iter().enumerate() {
            out.extend(MATRIX_NAMES.iter().map(|m| format!("backbone.{i}.{m}")));
        }
        for (k, head) in self.exits.iter().enumerate() {
            for j in 0..head.depth() {
                let p = head.block_prefix(k, j);
                out.extend(MATRIX_NAMES.iter().map(|m| format!("{p}.{m}")));
            }
            out.push(format!("exits.{k}.lm_proj"));
        }
        out
    }

    /// Writes a tensor under a checkpoint name. Names ending in `.A`/`.B`
    /// convert the projection to factored form.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let missing = || Error::integrity(format!("unknown parameter {name}"), "a parameter of this config", name.to_string());
        let check = |slot: &Tensor, value: &Tensor| {
            if slot.shape() != value.shape() {
                Err(Error::integrity(
                    format!("shape of {name}"),
                    format!("{:?}", slot.shape()),
                    format!("{:?}", value.shape()),
                ))
            } else {
                Ok(())
            }
        };
        if let Some(base) = name.strip_suffix(".A").or_else(|| name.strip_suffix(".B")) {
            let is_a = name.ends_with(".A");
            let lin = self.linear_mut(base).ok_or_else(missing)?;
            let (out_dim, in_dim) = (lin.out_dim(), lin.in_dim());
            let ok = if is_a { value.shape()[0] == out_dim } else { value.shape().get(1) == Some(&in_dim) };
            if value.shape().len() != 2 || !ok {
                return Err(Error::integrity(format!("factor shape of {name}"), format!("{out_dim}x{in_dim} factor"), format!("{:?}", value.shape())));
            }
            let rank = if is_a { value.shape()[1] } else { value.shape()[0] };
            if let Linear::Dense(_) = lin {
                *lin = Linear::Factored {
                    a: Tensor::zeros(&[out_dim, rank]),
                    b: Tensor::zeros(&[rank, in_dim]),
                };
            }
            let Linear::Factored { a, b } = lin else { unreachable!() };
            let slot = if is_a { a } else { b };
            if slot.shape() != value.shape() {
                return Err(Error::integrity(
                    format!("rank of {name}"),
                    format!("{:?}", slot.shape()),
                    format!("{:?}", value.shape()),
                ));
            }
            *slot = value;
            return Ok(());
        }
        let mut found: Option<Result<()>> = None;
        let mut value = Some(value);
        self.visit_mut(&mut |n, t| {
            if found.is_none() && n == name {
                let v = value.take().unwrap();
                found = Some(check(t, &v).map(|_| *t = v));
            }
        });
        found.unwrap_or_else(|| Err(missing()))
    }

    pub fn param_count(&self) -> ParamCount {
        let embedding = self.embedding.numel();
        let backbone = self.backbone.iter().map(BlockWeights::param_count).sum();
        let exits: Vec<usize> = self.exits.iter().map(ExitHead::param_count).collect();
        let total = embedding + backbone + exits.iter().sum::<usize>();
        ParamCount {
            embedding,
            backbone,
            exits,
            total,
        }
    }

    /// Standalone single-exit model: backbone layers up to the exit plus that
    /// exit's head, copied.
    pub fn extract_submodel(&self, branch: usize) -> Result<FamilialModel> {
        self.check_branch(branch)?;
        let depth = self.config.exit_depths[branch];
        let config = self.config.submodel(branch);
        let prefix = format!("exits.{branch}.");
        let frozen = self
            .frozen
            .iter()
            .filter_map(|n| {
                if let Some(rest) = n.strip_prefix(&prefix) {
                    Some(format!("exits.0.{rest}"))
                } else if let Some(rest) = n.strip_prefix("backbone.") {
                    let layer: usize = rest.split('.').next()?.parse().ok()?;
                    (layer < depth).then(|| n.clone())
                } else if n == "embedding" {
                    Some(n.clone())
                } else {
                    None
                }
            })
            .collect();
        Ok(FamilialModel {
            config,
            embedding: self.embedding.clone(),
            backbone: self.backbone[..depth].to_vec(),
            exits: vec![self.exits[branch].clone()],
            frozen,
            seed: self.seed,
        })
    }

    pub fn check_branch(&self, branch: usize) -> Result<()> {
        if branch >= self.n_exits() {
            return Err(Error::Input(format!("branch {branch} but the family has {} exits", self.n_exits())));
        }
        Ok(())
    }

    pub fn rope_table(&self) -> RopeTable {
        RopeTable::new(self.config.head_dim(), self.config.ctx_len, self.config.rope_base)
    }

    /// Logits `[B, T, vocab]` of one exit.
    pub fn forward_branch(&self, tokens: &[Vec<u32>], branch: usize) -> Result<Tensor> {
        self.check_branch(branch)?;
        let mut pass = ForwardPass::new(self, tokens, false)?;
        let h = pass.backbone_to(self.config.exit_depths[branch])?;
        let logits = pass.head(h, branch)?;
        pass.logits_tensor(logits)
    }

    /// One backbone pass feeding every exit head.
    pub fn forward_all_branches(&self, tokens: &[Vec<u32>]) -> Result<Vec<Tensor>> {
        let mut pass = ForwardPass::new(self, tokens, false)?;
        let ids = pass.all_branches()?;
        ids.into_iter().map(|id| pass.logits_tensor(id)).collect()
    }
}

/// Records one batched forward on a [`Graph`]. Parameters become leaves on
/// first use; with `track_grads` they require gradients unless frozen.
pub struct ForwardPass<'m> {
    model: &'m FamilialModel,
    pub graph: Graph,
    params: BTreeMap<String, NodeId>,
    track_grads: bool,
    rope: Arc<RopeTable>,
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
    positions: Vec<usize>,
    /// Block executions so far (each covers every position of the batch).
    pub block_calls: usize,
    tap: Option<Box<dyn FnMut(&str, &Tensor) + 'm>>,
    trace: Option<Vec<(String, NodeId, NodeId)>>,
}

impl<'m> ForwardPass<'m> {
    pub fn new(model: &'m FamilialModel, tokens: &[Vec<u32>], track_grads: bool) -> Result<Self> {
        let cfg = &model.config;
        let batch = tokens.len();
        let seq = tokens.first().map(Vec::len).unwrap_or(0);
        if batch == 0 || seq == 0 {
            return Err(Error::Input("empty token batch".into()));
        }
        if tokens.iter().any(|t| t.len() != seq) {
            return Err(Error::Input("ragged token batch".into()));
        }
        if seq > cfg.ctx_len {
            return Err(Error::Input(format!("sequence length {seq} exceeds ctx_len {}", cfg.ctx_len)));
        }
        let mut ids = Vec::with_capacity(batch * seq);
        for row in tokens {
            for &t in row {
                if t as usize >= cfg.vocab {
                    return Err(Error::Input(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
                }
                ids.push(t as usize);
            }
        }
        let positions = (0..batch).flat_map(|_| 0..seq).collect();
        Ok(Self {
            model,
            graph: Graph::new(),
            params: BTreeMap::new(),
            track_grads,
            rope: Arc::new(model.rope_table()),
            batch,
            seq,
            ids,
            positions,
            block_calls: 0,
            tap: None,
            trace: None,
        })
    }

    /// Observes the input of every projection as `(matrix name, rows)`.
    pub fn with_tap(mut self, tap: impl FnMut(&str, &Tensor) + 'm) -> Self {
        self.tap = Some(Box::new(tap));
        self
    }

    /// Keeps `(block name, input, output)` hidden states of every block run.
    pub fn with_block_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn block_trace(&self) -> Vec<(String, &Tensor, &Tensor)> {
        self.trace
            .iter()
            .flatten()
            .map(|(n, a, b)| (n.clone(), self.graph.value(*a), self.graph.value(*b)))
            .collect()
    }

    pub fn param_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let rg = self.track_grads && self.model.is_trainable(name);
        let id = self.graph.leaf(value.clone(), rg);
        self.params.insert(name.to_string(), id);
        id
    }

    fn linear(&mut self, x: NodeId, lin: &Linear, name: &str) -> Result<NodeId> {
        if let Some(tap) = self.tap.as_mut() {
            tap(name, self.graph.value(x));
        }
        match lin {
            Linear::Dense(w) => {
                let w = self.param(name, w);
                self.graph.linear(x, w)
            }
            Linear::Factored { a, b } => {
                let b = self.param(&format!("{name}.B"), b);
                let a = self.param(&format!("{name}.A"), a);
                let mid = self.graph.linear(x, b)?;
                self.graph.linear(mid, a)
            }
        }
    }

    pub fn embed(&mut self) -> Result<NodeId> {
        let table = self.param("embedding", &self.model.embedding);
        self.graph.embedding(table, self.ids.clone())
    }

    pub fn block(&mut self, h: NodeId, w: &BlockWeights, prefix: &str) -> Result<NodeId> {
        let cfg = &self.model.config;
        let eps = cfg.rms_eps;
        let shape = AttentionShape {
            batch: self.batch,
            seq: self.seq,
            q_heads: cfg.q_heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim(),
        };
        self.block_calls += 1;

        let g = self.param(&format!("{prefix}.attn_norm"), &w.attn_norm);
        let a = self.graph.rmsnorm(h, g, eps)?;
        let q = self.linear(a, &w.wq, &format!("{prefix}.wq"))?;
        let k = self.linear(a, &w.wk, &format!("{prefix}.wk"))?;
        let v = self.linear(a, &w.wv, &format!("{prefix}.wv"))?;
        let q = self.graph.rope(q, self.positions.clone(), self.rope.clone())?;
        let k = self.graph.rope(k, self.positions.clone(), self.rope.clone())?;
        let att = self.graph.attention(q, k, v, shape)?;
        let o = self.linear(att, &w.wo, &format!("{prefix}.wo"))?;
        let h = self.graph.add(h, o)?;

        let g = self.param(&format!("{prefix}.mlp_norm"), &w.mlp_norm);
        let m = self.graph.rmsnorm(h, g, eps)?;
        let gate = self.linear(m, &w.w_gate, &format!("{prefix}.w_gate"))?;
        let up = self.linear(m, &w.w_up, &format!("{prefix}.w_up"))?;
        let act = self.graph.swiglu(gate, up)?;
        let down = self.linear(act, &w.w_down, &format!("{prefix}.w_down"))?;
        let out = self.graph.add(h, down)?;
        Ok(out)
    }

    fn traced_block(&mut self, h: NodeId, w: &BlockWeights, prefix: &str) -> Result<NodeId> {
        let out = self.block(h, w, prefix)?;
        if let Some(t) = self.trace.as_mut() {
            t.push((prefix.to_string(), h, out));
        }
        Ok(out)
    }

    /// Residual stream after `depth` backbone layers.
    pub fn backbone_to(&mut self, depth: usize) -> Result<NodeId> {
        let model = self.model;
        let mut h = self.embed()?;
        for (i, w) in model.backbone[..depth].iter().enumerate() {
            h = self.traced_block(h, w, &format!("backbone.{i}"))?;
        }
        Ok(h)
    }

    /// Final hidden state of exit `k` before its norm.
    pub fn head_hidden(&mut self, h: NodeId, k: usize) -> Result<NodeId> {
        let model = self.model;
        let head = &model.exits[k];
        let mut h = h;
        for (j, w) in head.all_blocks().enumerate() {
            h = self.traced_block(h, w, &head.block_prefix(k, j))?;
        }
        Ok(h)
    }

    /// Logits node (`[B·T, vocab]`) of exit `k` applied to residual stream `h`.
    pub fn head(&mut self, h: NodeId, k: usize) -> Result<NodeId> {
        let model = self.model;
        let head = &model.exits[k];
        let h = self.head_hidden(h, k)?;
        let g = self.param(&format!("exits.{k}.final_norm"), &head.final_norm);
        let n = self.graph.rmsnorm(h, g, model.config.rms_eps)?;
        self.linear(n, &head.lm_proj, &format!("exits.{k}.lm_proj"))
    }

    /// Taps the residual stream at every exit depth during one backbone pass.
    pub fn all_branches(&mut self) -> Result<Vec<NodeId>> {
        let model = self.model;
        let cfg = &model.config;
        let mut taps = Vec::with_capacity(cfg.n_exits());
        let mut h = self.embed()?;
        for depth in 0..=cfg.n_layers {
            if cfg.exit_depths.contains(&depth) {
                taps.push(h);
            }
            if depth < cfg.n_layers {
                h = self.traced_block(h, &model.backbone[depth], &format!("backbone.{depth}"))?;
            }
        }
        taps.into_iter().enumerate().map(|(k, h)| self.head(h, k)).collect()
    }

    pub fn logits_tensor(&self, id: NodeId) -> Result<Tensor> {
        let v = self.graph.value(id).clone();
        let vocab = v.cols();
        v.reshape(&[self.batch, self.seq, vocab])
    }
}
