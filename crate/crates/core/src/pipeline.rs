//! The seven pipeline commands. Each reads a resolved [`RunConfig`], writes
//! its artifacts under an output directory and returns a human summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{self, lineage_fingerprint, params_digest, Checkpoint};
use crate::compress::{apply_compression, build_plan, capture_activations, default_scope, measure_compression, resolve_scope};
use crate::config::RunConfig;
use crate::data::{eval_windows, Batcher};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::expand::{ablation_run, expand, layer_cosine_similarity, verify_identity, write_cosine_csv, ExpansionReport};
use crate::infer::generate;
use crate::model::FamilialModel;
use crate::rng::SeedStream;
use crate::tokenizer::{ByteTokenizer, BOS};
use crate::train::{write_metrics_csv, LambdaSchedule, TrainState};

pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Expand,
    Compress,
    Eval,
    Generate,
    Analyze,
    Export,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Expand => "expand",
            Command::Compress => "compress",
            Command::Eval => "eval",
            Command::Generate => "generate",
            Command::Analyze => "analyze",
            Command::Export => "export",
        }
    }
}

/// Runs one command. The resolved config is saved next to the artifacts.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<String> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(out.join("run_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    match cmd {
        Command::Train => cmd_train(cfg, out),
        Command::Expand => cmd_expand(cfg, out),
        Command::Compress => cmd_compress(cfg, out),
        Command::Eval => cmd_eval(cfg, out),
        Command::Generate => cmd_generate(cfg, out),
        Command::Analyze => cmd_analyze(cfg, out),
        Command::Export => cmd_export(cfg, out),
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn create(path: PathBuf) -> Result<fs::File> {
    fs::File::create(&path).map_err(|e| Error::io(path, e))
}

/// A corpus file as tokens: must be nonempty UTF-8.
fn read_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    if std::str::from_utf8(&bytes).is_err() {
        return Err(Error::Data(format!("{} is not UTF-8", path.display())));
    }
    Ok(ByteTokenizer.encode(&bytes))
}

/// Loads the input checkpoint and checks it descends from the run's model
/// config, either as the family or as one exported branch of it.
pub fn load_checked(cfg: &RunConfig) -> Result<Checkpoint> {
    let dir = cfg.require_path(&cfg.paths.checkpoint, "checkpoint")?;
    let ckpt = checkpoint::load(dir)?;
    let found = lineage_fingerprint(&ckpt.model.config);
    let family = lineage_fingerprint(&cfg.model);
    let is_branch = (0..cfg.model.n_exits()).any(|b| lineage_fingerprint(&cfg.model.submodel(b)) == found);
    if found != family && !is_branch {
        return Err(Error::integrity("checkpoint config does not match run config", family, found));
    }
    Ok(ckpt)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seed = cfg.seed()?;
    let tokens = read_corpus(cfg.require_path(&cfg.paths.corpus, "corpus")?)?;
    let data = Batcher::new(&tokens, cfg.train.seq_len, cfg.train.batch, seed)?;
    let mut state = match &cfg.paths.checkpoint {
        Some(_) => {
            let ckpt = load_checked(cfg)?;
            checkpoint::check_compatible(&cfg.model, &ckpt.model.config)?;
            ckpt.into_state()
        }
        None => TrainState::new(FamilialModel::init(cfg.model.clone(), seed)?),
    };
    let start = state.step;
    let end = cfg.stop_at_step.unwrap_or(cfg.train.total_steps).min(cfg.train.total_steps);
    let schedule = cfg.lambda();
    let mut frozen_warning = false;
    state.train_until(&data, &cfg.train, &schedule, end, |m| frozen_warning |= m.all_frozen)?;

    checkpoint::save_state(out.join(CHECKPOINT_DIR), &state)?;
    let rows: Vec<_> = state.metrics.iter().map(|m| (None, m)).collect();
    write_metrics_csv(create(out.join("metrics.csv"))?, &rows)?;

    let mut s = format!("trained steps {start}..{end} of {}\n", cfg.train.total_steps);
    if let Some(last) = state.metrics.last() {
        for (k, l) in last.branch_losses.iter().enumerate() {
            writeln!(s, "branch {k} (depth {}): loss {l:.4}", cfg.model.exit_depths[k]).unwrap();
        }
    }
    if frozen_warning {
        s += "warning: every parameter was frozen during training\n";
    }
    Ok(s)
}

#[derive(Serialize)]
struct ExpandArtifact<'a> {
    #[serde(flatten)]
    report: &'a ExpansionReport,
    /// Digest of every parameter the expansion froze, before and after training.
    frozen_digest_before: String,
    frozen_digest_after: String,
    backbone_digest_before: String,
    backbone_digest_after: String,
    /// Deviation from the base family once training has moved the new blocks.
    deviation_after_training: f64,
    train_steps: u64,
}

pub fn cmd_expand(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seed = cfg.seed()?;
    let exp = cfg
        .expansion
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no `expansion` section".into()))?;
    if exp.train.seq_len > cfg.model.ctx_len {
        return Err(Error::Config("expansion.train.seq_len exceeds ctx_len".into()));
    }
    let base = load_checked(cfg)?.model;
    checkpoint::check_compatible(&cfg.model, &base.config)?;
    let spec = exp.spec(seed);
    let (expanded, report) = expand(&base, &spec)?;
    if report.identity_deviation != 0.0 {
        return Err(Error::Numeric(format!(
            "expanded family deviates from the base by {} before training",
            report.identity_deviation
        )));
    }
    let k = spec.target_branch;
    let backbone = |n: &str| n == "embedding" || n.starts_with("backbone.");
    let frozen_before = params_digest(&expanded, |n| !expanded.is_trainable(n));
    let backbone_before = params_digest(&expanded, backbone);

    let tokens = read_corpus(cfg.require_path(&cfg.paths.corpus, "corpus")?)?;
    let data = Batcher::new(&tokens, exp.train.seq_len, exp.train.batch, seed)?;
    // Only the target exit has trainable parameters, so only its loss is used.
    let schedule = LambdaSchedule::one_hot(expanded.n_exits(), k);
    let mut state = TrainState::new(expanded);
    state.train_until(&data, &exp.train, &schedule, exp.train.total_steps, |_| {})?;

    let model = &state.model;
    let frozen_after = params_digest(model, |n| !model.is_trainable(n));
    let probe = crate::expand::probe_batch(&base, SeedStream::new(seed).split("expand").split("probe"));
    let artifact = ExpandArtifact {
        report: &report,
        frozen_digest_before: frozen_before.clone(),
        frozen_digest_after: frozen_after.clone(),
        backbone_digest_before: backbone_before,
        backbone_digest_after: params_digest(model, backbone),
        deviation_after_training: verify_identity(&base, model, &probe)?,
        train_steps: exp.train.total_steps,
    };
    if frozen_before != frozen_after {
        return Err(Error::integrity("frozen parameters changed during expansion training", frozen_before, frozen_after));
    }
    write(out.join("expansion_report.json"), serde_json::to_string_pretty(&artifact)? + "\n")?;
    checkpoint::save_state(out.join(CHECKPOINT_DIR), &state)?;
    let rows: Vec<_> = state.metrics.iter().map(|m| (None, m)).collect();
    write_metrics_csv(create(out.join("metrics.csv"))?, &rows)?;

    let mut s = String::new();
    writeln!(s, "identity deviation at t0: {:?}", report.identity_deviation).unwrap();
    writeln!(
        s,
        "exit {k}: depth {} -> {}, added {} parameters ({} init)",
        report.branch_depth_before,
        report.branch_depth_after,
        report.added_params,
        report.init_mode.as_str()
    )
    .unwrap();
    writeln!(s, "trainable tensors: {}, frozen tensors: {}", report.trainable.len(), report.frozen_count).unwrap();
    if let Some(last) = state.metrics.last() {
        writeln!(s, "exit {k} loss after {} steps: {:.4}", exp.train.total_steps, last.branch_losses[k]).unwrap();
    }

    if exp.ablate {
        let steps = exp.ablation_steps.unwrap_or(exp.train.total_steps);
        let ab = ablation_run(&base, &spec, &data, &exp.train, steps)?;
        write_metrics_csv(create(out.join("ablation.csv"))?, &ab.rows())?;
        let tail = |t: &[crate::train::StepMetrics]| {
            let n = t.len().min(20).max(1);
            t[t.len().saturating_sub(n)..].iter().map(|m| m.branch_losses[k]).sum::<f64>() / n as f64
        };
        let (r, c) = (tail(&ab.randomized), tail(&ab.clone));
        writeln!(
            s,
            "ablation over {steps} steps, mean of last 20 losses: randomized {r:.4}, clone {c:.4} ({} lower)",
            if r <= c { "randomized" } else { "clone" }
        )
        .unwrap();
    }
    Ok(s)
}

/// Up to `count` non-overlapping windows of `len` tokens, plus a shorter
/// tail when the file runs out.
fn calibration_windows(tokens: &[u32], len: usize, count: usize) -> Vec<Vec<u32>> {
    eval_windows(tokens, len).into_iter().take(count).collect()
}

pub fn cmd_compress(cfg: &RunConfig, out: &Path) -> Result<String> {
    let c = cfg
        .compression
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no `compression` section".into()))?;
    let calib_path = cfg.require_path(&cfg.paths.calibration, "calibration")?;
    let model = load_checked(cfg)?.model;
    checkpoint::check_compatible(&cfg.model, &model.config)?;
    let calib = calibration_windows(&read_corpus(calib_path)?, c.calibration_len, c.calibration_sequences);
    if calib.is_empty() {
        return Err(Error::Config("calibration file yields no sequences".into()));
    }
    let patterns = c.scope.clone().unwrap_or_else(|| default_scope(&model));
    if patterns.is_empty() {
        return Err(Error::Config("no compression scope: the family has no expanded blocks".into()));
    }
    let scope = resolve_scope(&model, &patterns)?;
    let set = capture_activations(&model, &calib, &scope)?;
    let plan = build_plan(&model, &set, c.ratio)?;
    let compressed = apply_compression(&model, &plan)?;

    write(out.join("plan.json"), plan.to_json()?)?;
    checkpoint::save_model(out.join(CHECKPOINT_DIR), &compressed)?;
    let mut s = format!(
        "compressed {} matrices: {} -> {} parameters in scope, removal {:.4} (target {})\n",
        plan.entries.len(),
        plan.params_before,
        plan.params_after,
        plan.achieved_removal,
        c.ratio
    );
    for w in &plan.warnings {
        writeln!(s, "warning: {w}").unwrap();
    }
    if let Some(path) = &cfg.paths.heldout {
        let windows = eval_windows(&read_corpus(path)?, cfg.model.ctx_len);
        let report = measure_compression(&model, &compressed, &plan, &windows)?;
        report.write_csv(create(out.join("measure.csv"))?)?;
        s += &report.summary();
    }
    if (plan.achieved_removal - c.ratio).abs() > c.tolerance {
        return Err(Error::Numeric(format!(
            "achieved removal {:.4} misses target {} by more than {}",
            plan.achieved_removal, c.ratio, c.tolerance
        )));
    }
    Ok(s)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    let model = load_checked(cfg)?.model;
    let tokens = read_corpus(cfg.require_path(&cfg.paths.heldout, "heldout")?)?;
    let windows = eval_windows(&tokens, model.config.ctx_len);
    let nll = evaluate(&model, &windows)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(out.join("eval.csv"))?);
    w.write_record(["branch", "exit_depth", "tokens", "nll", "perplexity"])?;
    let mut s = format!("{:>6} {:>6} {:>8} {:>10} {:>12}\n", "branch", "depth", "tokens", "nll", "perplexity");
    for (k, b) in nll.iter().enumerate() {
        let depth = model.config.exit_depths[k];
        w.write_record([
            k.to_string(),
            depth.to_string(),
            b.count.to_string(),
            b.mean().to_string(),
            b.perplexity().to_string(),
        ])?;
        writeln!(s, "{k:>6} {depth:>6} {:>8} {:>10.4} {:>12.4}", b.count, b.mean(), b.perplexity()).unwrap();
    }
    w.flush().map_err(|e| Error::io("eval csv", e))?;
    Ok(s)
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seed = cfg.seed()?;
    let model = load_checked(cfg)?.model;
    let g = &cfg.generation;
    let mut prompt = ByteTokenizer.encode(g.prompt.as_bytes());
    if prompt.is_empty() {
        prompt.push(BOS);
    }
    let trace = generate(&model, &prompt, &g.policy(seed), g.max_new)?;
    trace.write_jsonl(create(out.join("trace.jsonl"))?)?;
    let mut text = ByteTokenizer.decode_lossy(&prompt);
    text += &ByteTokenizer.decode_lossy(&trace.tokens());
    write(out.join("generation.txt"), format!("{text}\n"))?;

    let hist = trace.histogram()?;
    let mut s = format!("{text}\n");
    writeln!(s, "exit depths: {:?}, mean depth {:.3}", hist.counts, hist.mean_depth).unwrap();
    writeln!(
        s,
        "layer calls: backbone {}, head {}, backfill {}{}",
        trace.counts.backbone,
        trace.counts.head,
        trace.counts.backfill,
        if trace.truncated { " (stopped at context length)" } else { "" }
    )
    .unwrap();
    Ok(s)
}

pub fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<String> {
    let model = load_checked(cfg)?.model;
    let branch = cfg.analyze.branch.unwrap_or_else(|| {
        (0..model.n_exits())
            .rev()
            .find(|&k| model.config.expanded(k) > 0)
            .unwrap_or(model.n_exits() - 1)
    });
    let tokens = ByteTokenizer.encode(cfg.analyze.text.as_bytes());
    let map = layer_cosine_similarity(&model, &tokens, branch)?;
    write_cosine_csv(create(out.join("cosine.csv"))?, &map)?;
    let mut s = format!("cosine similarity along exit {branch}, {} tokens\n", tokens.len());
    for (layer, row) in map.layers.iter().zip(&map.scores) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        writeln!(s, "{layer:<24} mean {mean:.4}").unwrap();
    }
    if map.degenerate {
        s += "warning: zero-norm hidden state, scored as 0\n";
    }
    Ok(s)
}

pub fn cmd_export(cfg: &RunConfig, out: &Path) -> Result<String> {
    let model = load_checked(cfg)?.model;
    let branch = cfg
        .export_branch
        .ok_or_else(|| Error::Config("export needs a branch (export_branch or --branch)".into()))?;
    let sub = model.extract_submodel(branch)?;
    checkpoint::save_model(out.join(CHECKPOINT_DIR), &sub)?;
    Ok(format!(
        "exported exit {branch} (depth {}): {} parameters\n",
        sub.config.n_layers,
        sub.param_count().total
    ))
}
