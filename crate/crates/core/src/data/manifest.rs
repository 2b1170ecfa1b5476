//! Dataset manifest: which volumes belong to which domain.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::io::write_atomic;

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRef {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    /// Source instance tag; volumes sharing one are paired by construction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    /// High-resolution ground truth, only known for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_truth: Option<PathBuf>,
}

fn default_patches_per_case() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clinical_volumes: Vec<VolumeRef>,
    pub micro_volumes: Vec<VolumeRef>,
    #[serde(default = "default_patches_per_case")]
    pub patches_per_case: usize,
    #[serde(default)]
    pub seed: u64,
    /// Draw a fresh patch set every epoch instead of reusing one fixed set.
    #[serde(default)]
    pub resample_each_epoch: bool,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_case == 0 {
            return Err(Error::param("patches_per_case must be positive"));
        }
        if self.clinical_volumes.is_empty() || self.micro_volumes.is_empty() {
            return Err(Error::param("both domains need at least one volume"));
        }
        let clinical_paths: HashSet<_> = self.clinical_volumes.iter().map(|v| &v.path).collect();
        let clinical_tags: HashSet<_> = self
            .clinical_volumes
            .iter()
            .filter_map(|v| v.provenance.as_ref())
            .collect();
        for m in &self.micro_volumes {
            if clinical_paths.contains(&m.path) {
                return Err(Error::param(format!("{} is listed in both domains", m.path.display())));
            }
            if let Some(tag) = &m.provenance {
                if clinical_tags.contains(tag) {
                    return Err(Error::param(format!(
                        "micro volume {} shares source instance {tag} with a clinical volume",
                        m.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads a manifest and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for v in m.clinical_volumes.iter_mut().chain(m.micro_volumes.iter_mut()) {
            v.path = base.join(&v.path);
            if let Some(t) = v.hr_truth.as_mut() {
                *t = base.join(&*t);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
