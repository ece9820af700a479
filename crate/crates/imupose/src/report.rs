//! `report.json` and `report.csv` written by every evaluating command.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    /// SHA-256 of the checkpoint file the command read or wrote.
    pub checkpoint_hash: Option<String>,
    /// Scalar results, flattened as `name → value`.
    pub metrics: BTreeMap<String, f64>,
    /// Structured per-item results.
    pub details: serde_json::Value,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Report {
    pub fn new(command: &str, config_hash: String) -> Self {
        Report {
            command: command.into(),
            config_hash,
            checkpoint_hash: None,
            metrics: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.metrics.insert(name.into(), value);
        self
    }

    /// Writes `report.json` and `report.csv` (one row per metric) under `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let json = out.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let path = out.join("report.csv");
        let csv_err = |e: csv::Error| Error::invalid(path.display().to_string(), e.to_string());
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["command", "config_hash", "checkpoint_hash", "metric", "value"]).map_err(csv_err)?;
        let ckpt = self.checkpoint_hash.as_deref().unwrap_or("");
        for (k, v) in &self.metrics {
            w.write_record([self.command.as_str(), &self.config_hash, ckpt, k, &v.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_files_carry_the_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Report::new("sync", "abc".into());
        r.checkpoint_hash = Some("def".into());
        r.metric("accuracy", 0.5).metric("mae_s", 0.25);
        r.write(dir.path()).unwrap();
        let back: Report = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "command,config_hash,checkpoint_hash,metric,value");
        assert_eq!(lines[1], "sync,abc,def,accuracy,0.5");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn file_hash_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(file_hash(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
