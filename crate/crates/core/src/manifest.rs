//! Run manifests: what was run, with which resolved configuration, and
//! which files it read and wrote.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const TOOL_VERSION: &str = concat!("lognet ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration (defaults, file and flags merged).
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.into(),
        })
    }

    pub fn input(mut self, p: impl AsRef<Path>) -> Self {
        self.inputs.push(p.as_ref().display().to_string());
        self
    }

    pub fn output(mut self, p: impl AsRef<Path>) -> Self {
        self.outputs.push(p.as_ref().display().to_string());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("train", &serde_json::json!({"epochs": 3}), 9)
            .unwrap()
            .input("data/train.jsonl")
            .output("out/model.logk");
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = RunManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config["epochs"], 3);
        assert!(back.tool_version.starts_with("lognet "));
    }
}
