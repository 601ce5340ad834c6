//! Serialized run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comm::CommConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub comm: CommConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(env: EnvSpec) -> Self {
        Self {
            env,
            train: TrainConfig::default(),
            comm: CommConfig::default(),
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.comm.validate()?;
        self.env.build().map(|_| ())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Short digest of everything that affects training (the output
    /// directory is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
