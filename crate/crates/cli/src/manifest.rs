//! Append-only run manifest with content hashes of every stage's inputs and
//! outputs.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::MissingArtifact;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub params: serde_json::Value,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|_| MissingArtifact(path.to_owned()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hash_artifact(name: &str, path: &Path) -> Result<ArtifactHash> {
    Ok(ArtifactHash {
        name: name.to_owned(),
        path: path.to_owned(),
        sha256: sha256_file(path)?,
    })
}

#[derive(Clone, Debug)]
pub struct Manifest {
    path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads the manifest at `path`; a missing file is an empty manifest.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        if path.exists() {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                entries.push(serde_json::from_str(&line).with_context(|| format!("{}:{}: bad manifest entry", path.display(), i + 1))?);
            }
        }
        Ok(Self {
            path: path.to_owned(),
            entries,
        })
    }

    /// Most recent entry that produced `path`.
    pub fn producer(&self, path: &Path) -> Option<(&ManifestEntry, &ArtifactHash)> {
        self.entries
            .iter()
            .rev()
            .find_map(|e| e.outputs.iter().find(|o| o.path == path).map(|o| (e, o)))
    }

    /// Hashes the inputs, checking each against the entry that produced it.
    /// Inputs no recorded stage produced are accepted as external.
    pub fn verify_inputs(&self, inputs: &[(&str, PathBuf)]) -> Result<Vec<ArtifactHash>> {
        let mut out = Vec::with_capacity(inputs.len());
        for (name, path) in inputs {
            if !path.exists() {
                return Err(MissingArtifact(path.clone()).into());
            }
            let h = hash_artifact(name, path)?;
            if let Some((entry, recorded)) = self.producer(path) {
                if recorded.sha256 != h.sha256 {
                    bail!(
                        "{} was modified after stage {} wrote it (recorded sha256 {}, found {})",
                        path.display(),
                        entry.stage,
                        recorded.sha256,
                        h.sha256
                    );
                }
            }
            out.push(h);
        }
        Ok(out)
    }

    pub fn append(&mut self, entry: ManifestEntry) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening {}", self.path.display()))?;
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        f.write_all(&line)?;
        self.entries.push(entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, outputs: Vec<ArtifactHash>) -> ManifestEntry {
        ManifestEntry {
            stage: stage.into(),
            version: "0".into(),
            seed: 1,
            params: serde_json::Value::Null,
            inputs: vec![],
            outputs,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn detects_modified_intermediate() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("x.json");
        std::fs::write(&art, b"{}").unwrap();
        let mut m = Manifest::open(&dir.path().join("manifest.jsonl")).unwrap();
        m.append(entry("s", vec![hash_artifact("x", &art).unwrap()])).unwrap();

        let reopened = Manifest::open(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reopened.entries.len(), 1);
        assert!(reopened.verify_inputs(&[("x", art.clone())]).is_ok());
        std::fs::write(&art, b"{ }").unwrap();
        let err = reopened.verify_inputs(&[("x", art.clone())]).unwrap_err();
        assert!(err.to_string().contains("modified"), "{err}");
    }

    #[test]
    fn missing_input_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::open(&dir.path().join("manifest.jsonl")).unwrap();
        let p = dir.path().join("absent.plac");
        let err = m.verify_inputs(&[("acts", p.clone())]).unwrap_err();
        assert_eq!(err.downcast_ref::<MissingArtifact>().unwrap().0, p);
    }
}
