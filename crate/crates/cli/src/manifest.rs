//! Run manifests: one `manifest.json` per output directory, enough to rerun
//! the command bit-exactly.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedInput {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub revision: String,
    pub seed: Option<u64>,
    pub experiment: Option<String>,
    pub config: Option<HashedInput>,
    pub corpus: Option<HashedInput>,
    pub checkpoint: Option<HashedInput>,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
}

pub fn revision() -> String {
    match option_env!("JA_TACOTRON_REVISION") {
        Some(r) => r.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Hash of a file, or of every file below a directory in sorted order.
pub fn hash_input(path: &Path) -> Result<HashedInput> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for f in files.iter().filter(|f| f.is_file()) {
            h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            h.update(std::fs::read(f).with_context(|| format!("reading {}", f.display()))?);
        }
    } else {
        h.update(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(HashedInput { path: path.to_path_buf(), sha256 })
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            revision: revision(),
            seed,
            experiment: None,
            config: None,
            corpus: None,
            checkpoint: None,
            started_unix_s: now(),
            finished_unix_s: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
            .with_context(|| format!("writing manifest in {}", dir.display()))
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_unix_s = Some(now());
        self.write(dir)
    }
}

/// Creates `dir` unless it already holds a run.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    if dir.join(MANIFEST_FILE).exists() {
        bail!("{} already holds a run (manifest.json exists)", dir.display());
    }
    if dir.exists() && !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    Ok(())
}

pub fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
