//! Run configuration: one JSON document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expand::{ExpansionSpec, InitMode};
use crate::infer::{Backfill, DecodeMode, ExitPolicy};
use crate::model::FamilyConfig;
use crate::train::{LambdaSchedule, TrainConfig};

pub const SEED_ENV: &str = "FAMILYKIT_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Input checkpoint for every command except a fresh `train`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    pub target_branch: usize,
    #[serde(default = "three")]
    pub n_new_blocks: usize,
    #[serde(default = "randomized")]
    pub init_mode: InitMode,
    #[serde(default)]
    pub clone_source: Option<usize>,
    #[serde(default = "std_002")]
    pub gaussian_std: f64,
    /// Training of the new blocks under the freeze mask.
    pub train: TrainConfig,
    /// Also run both init arms and write their loss traces.
    #[serde(default)]
    pub ablate: bool,
    #[serde(default)]
    pub ablation_steps: Option<u64>,
}

fn three() -> usize {
    3
}
fn randomized() -> InitMode {
    InitMode::Randomized
}
fn std_002() -> f64 {
    0.02
}

impl ExpansionConfig {
    pub fn spec(&self, seed: u64) -> ExpansionSpec {
        ExpansionSpec {
            target_branch: self.target_branch,
            n_new_blocks: self.n_new_blocks,
            init_mode: self.init_mode,
            clone_source: self.clone_source,
            gaussian_std: self.gaussian_std,
            seed: Some(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    pub ratio: f64,
    #[serde(default = "n64")]
    pub calibration_sequences: usize,
    #[serde(default = "n64")]
    pub calibration_len: usize,
    /// Glob patterns over projection names; defaults to the expanded scope.
    #[serde(default)]
    pub scope: Option<Vec<String>>,
    #[serde(default = "tolerance")]
    pub tolerance: f64,
}

fn n64() -> usize {
    64
}
fn tolerance() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default)]
    pub prompt: String,
    #[serde(default = "n64")]
    pub max_new: usize,
    #[serde(default = "half")]
    pub threshold: f64,
    #[serde(default)]
    pub allowed_exits: Vec<usize>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub backfill: Backfill,
}

fn half() -> f64 {
    0.5
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            max_new: 64,
            threshold: 0.5,
            allowed_exits: Vec::new(),
            temperature: None,
            backfill: Backfill::Lazy,
        }
    }
}

impl GenerationConfig {
    pub fn policy(&self, seed: u64) -> ExitPolicy {
        ExitPolicy {
            threshold: self.threshold,
            allowed_exits: self.allowed_exits.clone(),
            mode: match self.temperature {
                Some(temperature) => DecodeMode::Sample { temperature, seed },
                None => DecodeMode::Greedy,
            },
            backfill: self.backfill,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    #[serde(default = "fox")]
    pub text: String,
    /// Defaults to the deepest expanded exit, else the final exit.
    #[serde(default)]
    pub branch: Option<usize>,
}

fn fox() -> String {
    "A fox sat on a box".into()
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { text: fox(), branch: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to `FAMILYKIT_SEED`.
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: FamilyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub lambda: Option<LambdaSchedule>,
    /// Stop a training run early at this step; the schedules still span
    /// `train.total_steps`, so a later run can resume.
    #[serde(default)]
    pub stop_at_step: Option<u64>,
    #[serde(default)]
    pub expansion: Option<ExpansionConfig>,
    #[serde(default)]
    pub compression: Option<CompressionConfig>,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    #[serde(default)]
    pub export_branch: Option<usize>,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// Parses the document, applies overrides, resolves relative paths
    /// against `base_dir` and validates.
    pub fn from_json(text: &str, overrides: &[(String, String)], base_dir: &Path) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        // Paths written in the file are relative to the file; paths given as
        // overrides stay relative to the working directory.
        if let Some(paths) = value.get_mut("paths").and_then(Value::as_object_mut) {
            for v in paths.values_mut() {
                if let Some(p) = v.as_str().map(Path::new).filter(|p| p.is_relative()) {
                    *v = Value::String(base_dir.join(p).to_string_lossy().into_owned());
                }
            }
        }
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, overrides, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.ctx_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.ctx_len {}",
                self.train.seq_len, self.model.ctx_len
            )));
        }
        self.lambda().validate(self.model.n_exits())?;
        if let Some(e) = &self.expansion {
            e.train.validate()?;
        }
        if let Some(c) = &self.compression {
            if !(c.ratio > 0.0 && c.ratio < 1.0) {
                return Err(Error::Config(format!("compression.ratio {} outside (0, 1)", c.ratio)));
            }
            if c.calibration_sequences == 0 || c.calibration_len == 0 || c.calibration_len > self.model.ctx_len {
                return Err(Error::Config("calibration size must be positive and within ctx_len".into()));
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> LambdaSchedule {
        self.lambda
            .clone()
            .unwrap_or_else(|| LambdaSchedule::default_for(self.model.n_exits(), self.train.total_steps))
    }

    /// The config seed, else `FAMILYKIT_SEED`.
    pub fn seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Err(Error::Config(format!("no seed: set `seed` in the config or {SEED_ENV}"))),
        }
    }

    /// Short hash of the resolved config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require_path<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        let path = p.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is not set")))?;
        if !path.exists() {
            return Err(Error::Config(format!("paths.{key} {} does not exist", path.display())));
        }
        Ok(path)
    }
}

/// Sets `a.b.c` in a JSON document. The value parses as JSON when it can and
/// is taken as a string otherwise; missing objects along the path are created.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path `{path}`")));
    }
    let mut cur = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}` descends into a non-object")))?;
        let next = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if next.is_null() {
            *next = Value::Object(Default::default());
        }
        cur = next;
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Splits `--a.b=value` / `--a.b value` pairs out of an argument list.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(body) = a.strip_prefix("--").filter(|b| b.contains('.')) {
            let key_part = body.split('=').next().unwrap();
            if key_part.contains('.') && !key_part.contains('/') {
                if let Some((k, v)) = body.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = args
                        .get(i + 1)
                        .ok_or_else(|| Error::Config(format!("override {a} has no value")))?;
                    overrides.push((body.to_string(), v.clone()));
                    i += 1;
                }
                i += 1;
                continue;
            }
        }
        rest.push(a.clone());
        i += 1;
    }
    Ok((rest, overrides))
}
