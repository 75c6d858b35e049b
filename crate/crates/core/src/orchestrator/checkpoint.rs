//! Versioned, self-hashing snapshots of run state.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::HaltReason;
use crate::gateway::BudgetCounters;
use crate::pool::PolicyPool;

pub const SCHEMA: &str = "mles-checkpoint/1";
const DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint schema `{found}` is not `{SCHEMA}`")]
    SchemaMismatch { found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("no checkpoint in {0}")]
    NotFound(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Random streams are derived from the root seed per invocation, so the
/// seed is the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub root_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub config_hash: String,
    /// Last completed generation; 0 after the initial population.
    pub generation: u32,
    pub pool: PolicyPool,
    pub budget: BudgetCounters,
    pub seed_resets: u64,
    pub rng: RngState,
    pub ledger_len: u64,
    pub halted: Option<HaltReason>,
    pub content_hash: String,
}

fn hash_value(mut value: Value) -> String {
    if let Value::Object(map) = &mut value {
        map.remove("content_hash");
    }
    // serde_json maps are ordered by key, so this is canonical.
    let bytes = serde_json::to_vec(&value).expect("json value serializes");
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    /// Fills in `content_hash`.
    pub fn seal(mut self) -> Self {
        self.schema = SCHEMA.to_string();
        self.content_hash = String::new();
        let value = serde_json::to_value(&self).expect("checkpoint serializes");
        self.content_hash = hash_value(value);
        self
    }

    pub fn file_name(generation: u32) -> String {
        format!("gen-{generation:04}.json")
    }

    pub fn path(run_dir: &Path, generation: u32) -> PathBuf {
        run_dir.join(DIR).join(Self::file_name(generation))
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf, CheckpointError> {
        let path = Self::path(run_dir, self.generation);
        fs::create_dir_all(path.parent().expect("checkpoint dir"))?;
        let tmp = path.with_extension("tmp");
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::CorruptCheckpoint(e.to_string()))?;
        let stored = value
            .get("content_hash")
            .and_then(Value::as_str)
            .ok_or_else(|| CheckpointError::CorruptCheckpoint("missing content_hash".into()))?
            .to_string();
        if hash_value(value.clone()) != stored {
            return Err(CheckpointError::CorruptCheckpoint("content hash mismatch".into()));
        }
        let schema = value.get("schema").and_then(Value::as_str).unwrap_or_default();
        if schema != SCHEMA {
            return Err(CheckpointError::SchemaMismatch {
                found: schema.to_string(),
            });
        }
        serde_json::from_value(value).map_err(|e| CheckpointError::CorruptCheckpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The checkpoint of the highest generation under `run_dir`.
    pub fn latest(run_dir: &Path) -> Result<PathBuf, CheckpointError> {
        let dir = run_dir.join(DIR);
        let mut best: Option<(u32, PathBuf)> = None;
        let entries = fs::read_dir(&dir).map_err(|_| CheckpointError::NotFound(dir.display().to_string()))?;
        for entry in entries {
            let path = entry?.path();
            let generation = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("gen-"))
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u32>().ok());
            if let Some(g) = generation {
                if best.as_ref().is_none_or(|(b, _)| g > *b) {
                    best = Some((g, path));
                }
            }
        }
        best.map(|(_, p)| p)
            .ok_or_else(|| CheckpointError::NotFound(dir.display().to_string()))
    }
}
