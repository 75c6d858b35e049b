use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::MediaType;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact `{0}` not found")]
    Missing(String),
    #[error("artifact reference `{0}` escapes the store")]
    InvalidRef(String),
    #[error("artifact io: {0}")]
    Io(#[from] io::Error),
}

/// Content-addressed files under `<run_dir>/artifacts/`. References are run
/// directory relative paths, `artifacts/<sha256>.<ext>`.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    run_dir: PathBuf,
}

impl ArtifactStore {
    pub const DIR: &'static str = "artifacts";

    pub fn open(run_dir: impl Into<PathBuf>) -> Result<Self, ArtifactError> {
        let run_dir = run_dir.into();
        fs::create_dir_all(run_dir.join(Self::DIR))?;
        Ok(ArtifactStore { run_dir })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    /// Stores `bytes` and returns its reference. Writing the same content
    /// twice is a no-op.
    pub fn put(&self, bytes: &[u8], media_type: MediaType) -> Result<String, ArtifactError> {
        let hash = hex::encode(Sha256::digest(bytes));
        let content_ref = format!("{}/{}.{}", Self::DIR, hash, media_type.extension());
        let path = self.run_dir.join(&content_ref);
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(content_ref)
    }

    pub fn get(&self, content_ref: &str) -> Result<Vec<u8>, ArtifactError> {
        let path = self.resolve(content_ref)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ArtifactError::Missing(content_ref.to_string()),
            _ => ArtifactError::Io(e),
        })
    }

    pub fn contains(&self, content_ref: &str) -> bool {
        self.resolve(content_ref).is_ok_and(|p| p.is_file())
    }

    fn resolve(&self, content_ref: &str) -> Result<PathBuf, ArtifactError> {
        let rel = Path::new(content_ref);
        let well_formed = rel.starts_with(Self::DIR)
            && rel.components().count() == 2
            && !content_ref.contains("..");
        if !well_formed {
            return Err(ArtifactError::InvalidRef(content_ref.to_string()));
        }
        Ok(self.run_dir.join(rel))
    }
}

/// Hash part of a content reference (`artifacts/<hash>.<ext>` -> `<hash>`).
pub fn content_hash_of(content_ref: &str) -> &str {
    let name = content_ref.rsplit('/').next().unwrap_or(content_ref);
    name.split('.').next().unwrap_or(name)
}
