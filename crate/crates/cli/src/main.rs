use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use familykit::config::{split_overrides, RunConfig};
use familykit::pipeline::{self, Command};

/// Train, expand, compress and deploy a multi-exit transformer family.
///
/// Any config value can be overridden with a dotted path, for example
/// `--train.peak_lr=3e-4` or `--expansion.init_mode clone`.
#[derive(Parser)]
#[command(name = "familykit", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Joint training of every exit; resumes from --checkpoint.
    Train(Common),
    /// Append zero-residual blocks to one exit and train them over a frozen family.
    Expand(Common),
    /// Whitened low-rank compression of the expanded blocks and exit projections.
    Compress(Common),
    /// Per-exit perplexity on the held-out file.
    Eval(Common),
    /// Early-exit decoding with a confidence threshold.
    Generate(Common),
    /// Per-layer input/output cosine similarity along one exit.
    Analyze(Common),
    /// Write one exit and its backbone prefix as a standalone checkpoint.
    Export(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Input checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop training at this step; a later run resumes from the checkpoint.
    #[arg(long)]
    stop_at_step: Option<u64>,
    /// Expansion init mode: randomized or clone.
    #[arg(long)]
    init: Option<String>,
    /// Also run the randomized-vs-clone ablation.
    #[arg(long)]
    ablate: bool,
    /// Target compression ratio.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    prompt: Option<String>,
    /// Early-exit confidence threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    text: Option<String>,
    /// Exit index for analyze and export.
    #[arg(long)]
    branch: Option<usize>,
}

impl Common {
    /// Folds the convenience flags into dotted overrides.
    fn overrides(&self, cmd: Command) -> Vec<(String, String)> {
        let json = |v: &str| serde_string(v);
        let mut o = Vec::new();
        let mut push = |k: &str, v: String| o.push((k.to_string(), v));
        if let Some(p) = &self.checkpoint {
            push("paths.checkpoint", json(&p.to_string_lossy()));
        }
        if let Some(s) = self.seed {
            push("seed", s.to_string());
        }
        if let Some(s) = self.stop_at_step {
            push("stop_at_step", s.to_string());
        }
        if let Some(i) = &self.init {
            push("expansion.init_mode", json(i));
        }
        if self.ablate {
            push("expansion.ablate", "true".into());
        }
        if let Some(r) = self.ratio {
            push("compression.ratio", r.to_string());
        }
        if let Some(p) = &self.prompt {
            push("generation.prompt", json(p));
        }
        if let Some(t) = self.tau {
            push("generation.threshold", t.to_string());
        }
        if let Some(n) = self.max_new {
            push("generation.max_new", n.to_string());
        }
        if let Some(t) = &self.text {
            push("analyze.text", json(t));
        }
        if let Some(b) = self.branch {
            let key = if cmd == Command::Export { "export_branch" } else { "analyze.branch" };
            push(key, b.to_string());
        }
        o
    }
}

fn serde_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn run() -> anyhow::Result<String> {
    let args: Vec<String> = std::env::args().collect();
    let (rest, dotted) = split_overrides(&args[1..])?;
    let cli = Cli::parse_from(std::iter::once(args[0].clone()).chain(rest));
    let (cmd, common) = match &cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Expand(c) => (Command::Expand, c),
        Cmd::Compress(c) => (Command::Compress, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Generate(c) => (Command::Generate, c),
        Cmd::Analyze(c) => (Command::Analyze, c),
        Cmd::Export(c) => (Command::Export, c),
    };
    // Flags win over dotted overrides of the same key.
    let mut overrides = dotted;
    overrides.extend(common.overrides(cmd));
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let summary = pipeline::run(cmd, &cfg, &common.out).with_context(|| format!("{} failed", cmd.name()))?;
    Ok(summary)
}

fn main() -> ExitCode {
    match run() {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<familykit::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
