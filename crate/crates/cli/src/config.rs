use std::fs;
use std::path::{Path, PathBuf};

use mmfuse::data::{EncodingConfig, Protocol};
use mmfuse::distill::{KdConfig, TrainConfig};
use mmfuse::model::ArchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything one experiment needs. Missing keys take defaults; the
/// resolved form, with every default written out, is echoed into each
/// report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub protocol: Protocol,
    /// Modalities to use, in order. Empty means all of the dataset's.
    pub modalities: Vec<String>,
    pub encoding: EncodingConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub kd: KdConfig,
    pub output_dir: PathBuf,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("data"),
            protocol: Protocol::Loso { subject: 1 },
            modalities: Vec::new(),
            encoding: EncodingConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            kd: KdConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Hex sha256 of the canonical JSON form, salted with anything else
    /// that shapes the run (command, flags).
    pub fn digest(&self, salt: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(salt.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }

    /// `output_dir/<name>-<first 16 hex digits of the digest>`.
    pub fn run_dir(&self, name: &str, salt: &str) -> PathBuf {
        let digest = self.digest(salt);
        self.output_dir.join(format!("{name}-{}", &digest[..16]))
    }
}

/// Creates a fresh run directory. An existing one is only replaced when
/// `force` is set.
pub fn claim_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !force {
            return Err(CliError::config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
