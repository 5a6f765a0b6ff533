//! On-disk checkpoints: `manifest.json` plus `weights.bin` holding
//! little-endian f32 blobs, and `optimizer.bin` when training state is saved.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FamilialModel, FamilyConfig};
use crate::tensor::Tensor;
use crate::train::{Moments, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const OPTIMIZER: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentEntry {
    pub name: String,
    pub t: u64,
    /// Byte offset of the first moment; the second follows immediately.
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_fingerprint: String,
    pub config: FamilyConfig,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub optimizer: Vec<MomentEntry>,
}

/// A loaded checkpoint: the model plus whatever optimizer state was saved.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FamilialModel,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Checkpoint {
    pub fn into_state(self) -> TrainState {
        TrainState {
            model: self.model,
            moments: self.moments,
            step: self.step,
            metrics: Vec::new(),
        }
    }
}

fn push_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(buf: &[u8], offset: u64, length: u64, what: &str) -> Result<Vec<f32>> {
    let end = offset.checked_add(length).filter(|&e| e <= buf.len() as u64 && length % 4 == 0);
    let Some(end) = end else {
        return Err(Error::integrity(
            format!("byte range of {what}"),
            format!("within {} bytes", buf.len()),
            format!("{offset}+{length}"),
        ));
    };
    Ok(buf[offset as usize..end as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_parts(dir: &Path, model: &FamilialModel, step: u64, moments: &BTreeMap<String, Moments>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::new();
    let mut params = Vec::new();
    for (name, t) in model.named_params() {
        let offset = weights.len() as u64;
        push_f32s(&mut weights, t.data());
        params.push(ParamEntry {
            trainable: model.is_trainable(&name),
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: weights.len() as u64 - offset,
        });
    }
    let mut opt = Vec::new();
    let mut optimizer = Vec::new();
    for (name, m) in moments {
        let offset = opt.len() as u64;
        push_f32s(&mut opt, &m.m);
        push_f32s(&mut opt, &m.v);
        optimizer.push(MomentEntry {
            name: name.clone(),
            t: m.t,
            offset,
            length: (opt.len() as u64 - offset) / 2,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_fingerprint: model.config.fingerprint(),
        config: model.config.clone(),
        seed: model.seed,
        step,
        params,
        optimizer,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&dir.join(WEIGHTS), &weights)?;
    let opt_path = dir.join(OPTIMIZER);
    if moments.is_empty() {
        if opt_path.exists() {
            fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
        }
    } else {
        write_file(&opt_path, &opt)?;
    }
    write_file(&dir.join(MANIFEST), &json)
}

/// Saves weights and the freeze mask, without optimizer state.
pub fn save_model(dir: impl AsRef<Path>, model: &FamilialModel) -> Result<()> {
    save_parts(dir.as_ref(), model, 0, &BTreeMap::new())
}

/// Saves everything needed to resume training bit-identically.
pub fn save_state(dir: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    save_parts(dir.as_ref(), &state.model, state.step, &state.moments)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text)
        .map_err(|e| Error::integrity(format!("{} is not valid JSON: {e}", path.display()), "manifest", "unparseable"))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::integrity(
            "checkpoint format_version",
            FORMAT_VERSION.to_string(),
            version.map_or("missing".into(), |v| v.to_string()),
        ));
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::integrity(format!("malformed manifest: {e}"), "manifest schema", "mismatch"))?;
    let fp = manifest.config.fingerprint();
    if fp != manifest.config_fingerprint {
        return Err(Error::integrity("manifest config fingerprint", manifest.config_fingerprint, fp));
    }
    Ok(manifest)
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let wpath = dir.join(WEIGHTS);
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut model = FamilialModel::skeleton(manifest.config.clone(), manifest.seed)?;
    let mut expected_len = 0u64;
    for p in &manifest.params {
        if p.dtype != "f32" {
            return Err(Error::integrity(format!("dtype of {}", p.name), "f32", p.dtype.clone()));
        }
        let numel: usize = p.shape.iter().product();
        if p.length != 4 * numel as u64 || p.offset != expected_len {
            return Err(Error::integrity(
                format!("layout of {}", p.name),
                format!("offset {expected_len}, {} bytes", 4 * numel),
                format!("offset {}, {} bytes", p.offset, p.length),
            ));
        }
        expected_len += p.length;
        let data = read_f32s(&weights, p.offset, p.length, &p.name)?;
        model.set_param(&p.name, Tensor::new(p.shape.clone(), data)?)?;
    }
    if expected_len != weights.len() as u64 {
        return Err(Error::integrity("weights.bin size", expected_len.to_string(), weights.len().to_string()));
    }
    let names: Vec<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
    let model_names = model.param_names();
    if names != model_names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::integrity(
            "parameter table",
            format!("{} parameters of the config", model_names.len()),
            format!("{} entries", names.len()),
        ));
    }
    model.frozen = manifest.params.iter().filter(|p| !p.trainable).map(|p| p.name.clone()).collect();

    let mut moments = BTreeMap::new();
    if !manifest.optimizer.is_empty() {
        let opath = dir.join(OPTIMIZER);
        let opt = fs::read(&opath).map_err(|e| Error::io(&opath, e))?;
        for e in &manifest.optimizer {
            let numel = model
                .param(&e.name)
                .map(Tensor::numel)
                .ok_or_else(|| Error::integrity(format!("optimizer entry {}", e.name), "a model parameter", "unknown"))?;
            if e.length != 4 * numel as u64 {
                return Err(Error::integrity(format!("optimizer length of {}", e.name), (4 * numel).to_string(), e.length.to_string()));
            }
            moments.insert(
                e.name.clone(),
                Moments {
                    m: read_f32s(&opt, e.offset, e.length, &e.name)?,
                    v: read_f32s(&opt, e.offset + e.length, e.length, &e.name)?,
                    t: e.t,
                },
            );
        }
    }
    Ok(Checkpoint {
        model,
        step: manifest.step,
        moments,
    })
}

/// Fingerprint of a config's base lineage, ignoring blocks added by expansion.
pub fn lineage_fingerprint(config: &FamilyConfig) -> String {
    let mut base = config.clone();
    base.expanded_blocks.clear();
    base.fingerprint()
}

/// Integrity error, with both fingerprints, when a checkpoint was not built
/// from the expected model config.
pub fn check_compatible(expected: &FamilyConfig, found: &FamilyConfig) -> Result<()> {
    let (a, b) = (lineage_fingerprint(expected), lineage_fingerprint(found));
    if a != b {
        return Err(Error::integrity("checkpoint config does not match run config", a, b));
    }
    Ok(())
}

/// SHA-256 over the names and bytes of every parameter the filter accepts.
pub fn params_digest(model: &FamilialModel, include: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named_params() {
        if include(&name) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{name_matches, LambdaSchedule, TrainConfig};

    fn read(dir: &Path) -> (Vec<u8>, Vec<u8>) {
        (fs::read(dir.join(MANIFEST)).unwrap(), fs::read(dir.join(WEIGHTS)).unwrap())
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let mut model = FamilialModel::init(FamilyConfig::desk(), 11).unwrap();
        model.set_freeze(|n| name_matches("backbone.*", n));
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        save_model(&a, &model).unwrap();
        let loaded = load(&a).unwrap();
        assert_eq!(loaded.model, model);
        save_model(&b, &loaded.model).unwrap();
        assert_eq!(read(&a), read(&b));
    }

    #[test]
    fn factored_and_optimizer_state_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let model = FamilialModel::init(FamilyConfig::desk(), 12).unwrap();
        let mut state = TrainState::new(model);
        let batch = vec![(0..12u32).map(|i| i * 9 % 256).collect::<Vec<_>>(); 2];
        state
            .train_step(&batch, &TrainConfig::desk(), &LambdaSchedule::default_for(2, 10))
            .unwrap();
        let lin = state.model.linear("exits.1.lm_proj").unwrap();
        let (o, i) = (lin.out_dim(), lin.in_dim());
        state
            .model
            .set_param("exits.1.lm_proj.A", Tensor::from_fn(&[o, 3], |k| k as f32 * 1e-3))
            .unwrap();
        state
            .model
            .set_param("exits.1.lm_proj.B", Tensor::from_fn(&[3, i], |k| -(k as f32) * 1e-3))
            .unwrap();
        state.moments.remove("exits.1.lm_proj");
        let a = tmp.path().join("a");
        save_state(&a, &state).unwrap();
        let ck = load(&a).unwrap();
        assert_eq!(ck.step, 1);
        assert_eq!(ck.model, state.model);
        assert_eq!(ck.moments, state.moments);
        let b = tmp.path().join("b");
        save_state(&b, &ck.into_state()).unwrap();
        assert_eq!(read(&a), read(&b));
        assert_eq!(fs::read(a.join(OPTIMIZER)).unwrap(), fs::read(b.join(OPTIMIZER)).unwrap());
    }

    #[test]
    fn version_and_size_checks() {
        let tmp = tempfile::tempdir().unwrap();
        let model = FamilialModel::init(FamilyConfig::desk(), 13).unwrap();
        save_model(tmp.path(), &model).unwrap();
        let mpath = tmp.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 2")).unwrap();
        assert_eq!(load(tmp.path()).unwrap_err().exit_code(), 5);

        fs::write(&mpath, text).unwrap();
        let wpath = tmp.path().join(WEIGHTS);
        let mut w = fs::read(&wpath).unwrap();
        w.pop();
        fs::write(&wpath, w).unwrap();
        assert_eq!(load(tmp.path()).unwrap_err().exit_code(), 5);
    }

    #[test]
    fn compatibility_reports_both_fingerprints() {
        let a = FamilyConfig::desk();
        let mut b = a.clone();
        b.hidden = 48;
        let err = check_compatible(&a, &b).unwrap_err();
        let text = err.to_string();
        assert!(text.contains(&lineage_fingerprint(&a)) && text.contains(&lineage_fingerprint(&b)));
        let mut c = a.clone();
        c.expanded_blocks = vec![0, 3];
        check_compatible(&a, &c).unwrap();
    }

    #[test]
    fn digest_tracks_selected_params() {
        let mut model = FamilialModel::init(FamilyConfig::desk(), 14).unwrap();
        let is_backbone = |n: &str| n.starts_with("backbone.");
        let before = params_digest(&model, is_backbone);
        model.exits[0].final_norm.data_mut()[0] = 3.0;
        assert_eq!(params_digest(&model, is_backbone), before);
        model.backbone[0].attn_norm.data_mut()[0] = 3.0;
        assert_ne!(params_digest(&model, is_backbone), before);
    }
}
