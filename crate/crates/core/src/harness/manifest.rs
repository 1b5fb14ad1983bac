//! `manifest.json`: what each stage produced and from which seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::StageSeeds;
use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub classes: Vec<String>,
    /// Per-class counts keyed by archive role (`source`, `train`, `test`, ...).
    pub counts: BTreeMap<String, Vec<usize>>,
    pub seeds: StageSeeds,
    pub stages: Vec<StageRecord>,
    /// SHA-256 of every artifact written, keyed by file name.
    pub files: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(classes: Vec<String>, seeds: StageSeeds) -> Self {
        Manifest {
            schema_version: 1,
            classes,
            counts: BTreeMap::new(),
            seeds,
            stages: Vec::new(),
            files: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Records a stage, replacing any earlier record of the same name.
    pub fn record_stage(&mut self, name: &str, params: serde_json::Value) {
        self.stages.retain(|s| s.name != name);
        self.stages.push(StageRecord {
            name: name.to_owned(),
            params,
        });
    }

    pub fn has_stage(&self, name: &str) -> bool {
        self.stages.iter().any(|s| s.name == name)
    }

    pub fn record_file(&mut self, name: &str, bytes: &[u8]) {
        self.files.insert(name.to_owned(), sha256_hex(bytes));
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: invalid manifest: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
