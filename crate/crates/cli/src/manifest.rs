use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written to the output directory before any long computation starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Git blob hash of the effective configuration after flag overrides.
    pub config_hash: String,
    /// The only field that differs between identical runs.
    pub created_unix: u64,
}

/// `sha1("blob <len>\0" ‖ content)`, the object id git assigns to a file.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(subcommand: &str, config_path: Option<&Path>, seed: u64, out_dir: &Path, effective: &str) -> Self {
        Self {
            subcommand: subcommand.into(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            out_dir: out_dir.to_path_buf(),
            config_hash: git_blob_hash(effective.as_bytes()),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(self.out_dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
