use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use conngen::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const JOURNAL: &str = "journal.jsonl";
pub const EPOCHS: &str = "epochs.jsonl";

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub data_dir: PathBuf,
    /// SHA-256 of each corpus file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(conngen::Error::Usage(format!("{} does not exist", path.display())).into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| conngen::Error::Config(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| conngen::Error::Usage(format!("{} is not a run directory: {e}", run_dir.display())))?;
        serde_json::from_str(&text).map_err(|e| conngen::Error::Data(format!("{}: {e}", path.display())).into())
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(MANIFEST), self)
    }

    /// Refuses a corpus file whose checksum differs from the one recorded at training
    /// time, unless `allow` is set.
    pub fn verify(&self, file: &Path, allow: bool) -> Result<()> {
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let actual = sha256_file(file)?;
        match self.checksums.get(&name) {
            Some(expected) if *expected == actual => Ok(()),
            Some(expected) if allow => {
                log::warn!("{name}: checksum {actual} differs from manifest {expected}; continuing");
                Ok(())
            }
            Some(expected) => Err(conngen::Error::Data(format!(
                "{} has checksum {actual} but the run was trained against {expected}; \
                 pass --allow-checksum-mismatch to evaluate anyway",
                file.display()
            ))
            .into()),
            None => {
                log::warn!("manifest records no checksum for {name}");
                Ok(())
            }
        }
    }
}
