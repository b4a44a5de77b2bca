use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Command;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to re-run a command and check that it reproduced its
/// outputs byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    /// Resolved configuration, for reading; replay uses `command`.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub metrics: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Fails unless every input still has its recorded hash.
    pub fn check_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = sha256_file(&f.path)?;
            if now != f.sha256 {
                bail!("input {} changed since the run (sha256 {} != {})", f.path.display(), now, f.sha256);
            }
        }
        Ok(())
    }

    /// Outputs whose current hash differs from the recorded one.
    pub fn mismatched_outputs(&self) -> Result<Vec<PathBuf>> {
        let mut bad = Vec::new();
        for f in &self.outputs {
            if !f.path.exists() || sha256_file(&f.path)? != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}
