//! Run manifest: artifact paths, content hashes and the configuration each
//! artifact was created with.
//!
//! Downstream commands check that every upstream artifact still hashes to the
//! recorded value, and that the inputs recorded for it are the current
//! entries of the manifest. A mismatch is a [`Error::StaleArtifact`] naming
//! the offending file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{file_hash, hash_hex, read_file, write_file};

pub const VOCAB: &str = "vocab";
pub const MODEL: &str = "model";
pub const JOINT_MODEL: &str = "joint_model";
pub const LM: &str = "lm";
pub const RESPONSES: &str = "responses";
pub const INDEX: &str = "index";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: PathBuf,
    pub sha256: String,
    /// Configuration snapshot of the command that wrote the artifact.
    pub config: serde_json::Value,
    /// Upstream artifact kind to the hash it had when this one was written.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl RunManifest {
    /// Reads `path`, or starts an empty manifest when it does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    /// Checks that `kind` is recorded at `path`, that the file still has the
    /// recorded hash, and that its own inputs match the manifest.
    pub fn verify(&self, kind: &str, path: &Path) -> Result<()> {
        let entry = self
            .artifacts
            .get(kind)
            .ok_or_else(|| Error::Config(format!("{kind} is not recorded in the manifest")))?;
        if entry.path != path || hash_hex(&file_hash(path)?) != entry.sha256 {
            return Err(Error::StaleArtifact { path: path.to_path_buf() });
        }
        for (up, hash) in &entry.inputs {
            match self.artifacts.get(up) {
                Some(e) if &e.sha256 == hash => {}
                _ => return Err(Error::StaleArtifact { path: path.to_path_buf() }),
            }
        }
        Ok(())
    }

    /// Records `path` as the current `kind`, with the current hashes of the
    /// named upstream kinds as its inputs.
    pub fn record(&mut self, kind: &str, path: &Path, config: serde_json::Value, inputs: &[&str]) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|&up| {
                let e = self
                    .artifacts
                    .get(up)
                    .ok_or_else(|| Error::Config(format!("{up} is not recorded in the manifest")))?;
                Ok((up.to_string(), e.sha256.clone()))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let entry = ArtifactEntry {
            path: path.to_path_buf(),
            sha256: hash_hex(&file_hash(path)?),
            config,
            inputs,
        };
        self.artifacts.insert(kind.to_string(), entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn verify_detects_changed_files_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = dir.path().join("vocab.txt");
        let model = dir.path().join("model.bin");
        std::fs::write(&vocab, "a").unwrap();
        std::fs::write(&model, "m").unwrap();
        let mut m = RunManifest::default();
        m.record(VOCAB, &vocab, json!({"max_n": 2}), &[]).unwrap();
        m.record(MODEL, &model, json!({}), &[VOCAB]).unwrap();
        m.verify(VOCAB, &vocab).unwrap();
        m.verify(MODEL, &model).unwrap();

        let mpath = dir.path().join("manifest.json");
        m.save(&mpath).unwrap();
        assert_eq!(RunManifest::load_or_default(&mpath).unwrap(), m);

        // Rebuilding the vocabulary makes the model stale.
        std::fs::write(&vocab, "b").unwrap();
        assert!(matches!(m.verify(VOCAB, &vocab), Err(Error::StaleArtifact { .. })));
        m.record(VOCAB, &vocab, json!({}), &[]).unwrap();
        match m.verify(MODEL, &model) {
            Err(Error::StaleArtifact { path }) => assert_eq!(path, model),
            other => panic!("{other:?}"),
        }
        assert!(m.verify(LM, &vocab).is_err());
        assert!(m.record(INDEX, &model, json!({}), &[RESPONSES]).is_err());
    }

    #[test]
    fn missing_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::load_or_default(&dir.path().join("none.json")).unwrap();
        assert!(m.artifacts.is_empty());
    }
}
