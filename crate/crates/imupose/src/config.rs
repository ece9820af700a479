//! Run configuration: defaults, deep-merged with a JSON file, then dotted-path
//! overrides such as `--train.batch_size 128`. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use imupose_core::encoders::EncoderConfig;
use imupose_core::model::{LossCheck, ModelSpec};
use imupose_core::synth::{GenConfig, NoiseConfig};
use imupose_core::tasks::{FinetuneConfig, SyncConfig};
use imupose_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mtp_heads: usize,
    pub mtp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            mtp_heads: 4,
            mtp_hidden: 512,
        }
    }
}

impl ModelConfig {
    /// Spec for a dataset layout; the temperature starts at the loss config's value.
    pub fn spec(&self, imu_channels: usize, part_widths: Vec<usize>, tau_init: f64) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            imu_channels,
            part_widths,
            tau_init,
            mtp_heads: self.mtp_heads,
            mtp_hidden: self.mtp_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub group: usize,
    pub windows_per_sequence: usize,
    /// IMU sensor ids kept at evaluation; empty keeps all.
    pub sensors: Vec<String>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            group: 64,
            windows_per_sequence: 3,
            sensors: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncEmbedder {
    Model,
    /// Gyroscope rate against pose-derived angular velocity; needs no checkpoint.
    Physics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncTaskConfig {
    #[serde(flatten)]
    pub sync: SyncConfig,
    pub clips: usize,
    /// Injected lags are drawn uniformly from this range.
    pub lag_range_s: [f64; 2],
    pub embedder: SyncEmbedder,
    pub seed: u64,
}

impl Default for SyncTaskConfig {
    fn default() -> Self {
        SyncTaskConfig {
            sync: SyncConfig::default(),
            clips: 100,
            lag_range_s: [-7.0, 7.0],
            embedder: SyncEmbedder::Model,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub scenes: usize,
    pub subjects: usize,
    pub duration_s: f64,
    pub window_len_s: f64,
    /// Sensors of one wearer queried per scene for part localization.
    pub part_queries_per_scene: usize,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            scenes: 100,
            subjects: 3,
            duration_s: 10.0,
            window_len_s: 5.0,
            part_queries_per_scene: 4,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HarMode {
    #[serde(rename = "1nn")]
    #[value(name = "1nn")]
    OneNn,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarConfig {
    pub mode: HarMode,
    pub windows_per_sequence: usize,
    pub finetune: FinetuneConfig,
}

impl Default for HarConfig {
    fn default() -> Self {
        HarConfig {
            mode: HarMode::OneNn,
            windows_per_sequence: 3,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Objective variants: any of `global`, `global+local`, `global+local+token`.
    pub objectives: Vec<String>,
    pub mtp: Vec<bool>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0],
            objectives: vec!["global".into(), "global+local".into(), "global+local+token".into()],
            mtp: vec![false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sync: SyncTaskConfig,
    pub localize: LocalizeConfig,
    pub har: HarConfig,
    pub gradcheck: LossCheck,
    pub ablate: AblateConfig,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c` → value; the text is parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, path: &str, text: &str) -> Result<()> {
    let value = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::invalid(format!("override '{path}'"), "empty path segment"));
    }
    for (i, k) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("override '{path}'"), format!("'{}' is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Defaults ← file ← overrides, then validation of every section.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::resolve_from(None, file, overrides)
    }

    /// As [`RunConfig::resolve`], with `base` (such as a checkpoint's stored
    /// config) merged over the defaults first.
    pub fn resolve_from(base: Option<&Value>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default()).map_err(|e| Error::json("defaults", e))?;
        if let Some(b) = base.filter(|b| b.is_object()) {
            merge(&mut v, b.clone());
        }
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| Error::json(p, e))?;
            if !patch.is_object() {
                return Err(Error::invalid(p.display().to_string(), "config must be a JSON object"));
            }
            merge(&mut v, patch);
        }
        for (k, val) in overrides {
            apply_override(&mut v, k, val)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: imupose_core::Result<()>| r.map_err(|e| Error::invalid(format!("config.{name}"), e.to_string()));
        section("model.encoder", self.model.encoder.validate())?;
        section("train", self.train.validate())?;
        section("sync", self.sync.sync.validate())?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.group < 2 {
            return Err(Error::invalid("config.eval", "ks must be non-empty and ≥ 1, group ≥ 2"));
        }
        if self.sync.lag_range_s[0] > self.sync.lag_range_s[1] {
            return Err(Error::invalid("config.sync.lag_range_s", "range is reversed"));
        }
        if self.localize.subjects == 0 || self.localize.window_len_s > self.localize.duration_s {
            return Err(Error::invalid("config.localize", "needs subjects ≥ 1 and window ≤ duration"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).unwrap_or_default()))
    }

    pub fn write_effective(&self, out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&p, e))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Dotted `(path, value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Split `--a.b value` / `--a.b=value` pairs out of an argument list.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| Error::invalid(format!("--{k}"), "missing value"))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_applied_and_typed() {
        let o = vec![
            ("train.batch_size".to_string(), "32".to_string()),
            ("har.mode".to_string(), "finetune".to_string()),
            ("model.encoder.conv_channels".to_string(), "[8,16]".to_string()),
        ];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.har.mode, HarMode::Finetune);
        assert_eq!(c.model.encoder.conv_channels, vec![8, 16]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::resolve(None, &[("train.batch_sise".into(), "3".into())]).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"trian": {}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).unwrap_err().to_string().contains("trian"));
    }

    #[test]
    fn file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"patience": 7}, "sync": {"top_k": 3}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &[("train.patience".into(), "9".into())]).unwrap();
        assert_eq!(c.train.patience, 9);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.sync.sync.top_k, 3);
    }

    #[test]
    fn validation_names_the_section() {
        let err = RunConfig::resolve(None, &[("train.batch_size".into(), "1".into())]).unwrap_err().to_string();
        assert!(err.contains("config.train"), "{err}");
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let args = ["train", "--out", "x", "--train.lr_x=3", "--gen.seed", "4"].map(String::from).to_vec();
        let (rest, o) = extract_overrides(args).unwrap();
        assert_eq!(rest, vec!["train", "--out", "x"]);
        assert_eq!(o, vec![("train.lr_x".into(), "3".into()), ("gen.seed".into(), "4".into())]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn sync_keys_sit_directly_under_the_section() {
        let c = RunConfig::resolve(None, &[("sync.top_k".into(), "3".into())]).unwrap();
        assert_eq!(c.sync.sync.top_k, 3);
        assert!(RunConfig::resolve(None, &[("sync.bogus".into(), "3".into())]).is_err());
    }
}
