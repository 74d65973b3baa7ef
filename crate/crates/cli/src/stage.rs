//! Output stamps: every artifact gets a `<file>.meta.json` recording the
//! stage hash, seed and version. A stage whose outputs all carry the current
//! hash is skipped; a different hash is refused unless forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use unilab::io::{read_json, write_json};
use unilab::ARTIFACT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Input path → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

pub fn stamp_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading input {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Stage {
    pub stamp: Stamp,
    outputs: Vec<PathBuf>,
}

impl Stage {
    /// `config` is the part of the pipeline config the stage reads, plus any
    /// command-line choices that change its output.
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64, inputs: &[&Path], outputs: Vec<PathBuf>) -> anyhow::Result<Self> {
        let mut input_map = BTreeMap::new();
        for p in inputs {
            input_map.insert(p.display().to_string(), file_digest(p)?);
        }
        let blob = serde_json::to_vec(&(command, config, seed, ARTIFACT_VERSION, input_map.values().collect::<Vec<_>>()))?;
        Ok(Stage {
            stamp: Stamp {
                command: command.to_string(),
                config_hash: hex(&Sha256::digest(&blob)),
                seed,
                version: ARTIFACT_VERSION.to_string(),
                inputs: input_map,
            },
            outputs,
        })
    }

    pub fn hash(&self) -> &str {
        &self.stamp.config_hash
    }

    /// True when every output exists with a matching stamp. Errors when an
    /// existing output was produced by a different configuration.
    pub fn is_fresh(&self, force: bool) -> anyhow::Result<bool> {
        let mut all = true;
        for out in &self.outputs {
            let sp = stamp_path(out);
            if !out.exists() || !sp.exists() {
                all = false;
                continue;
            }
            let found: Stamp = read_json(&sp)?;
            if found.config_hash != self.stamp.config_hash {
                if force {
                    all = false;
                    continue;
                }
                bail!(StaleArtifact(format!(
                    "{} was produced with config hash {} but the current {} config hashes to {}; rerun with --force to replace it",
                    out.display(),
                    &found.config_hash[..12],
                    self.stamp.command,
                    &self.stamp.config_hash[..12]
                )));
            }
        }
        Ok(all)
    }

    pub fn prepare(&self) -> anyhow::Result<()> {
        for out in &self.outputs {
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> anyhow::Result<()> {
        for out in &self.outputs {
            write_json(&stamp_path(out), &self.stamp)?;
        }
        Ok(())
    }
}

/// An artifact on disk does not belong to the declared configuration.
#[derive(Debug)]
pub struct StaleArtifact(pub String);

impl std::fmt::Display for StaleArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for StaleArtifact {}
