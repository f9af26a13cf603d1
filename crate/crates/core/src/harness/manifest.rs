use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_model, HarnessError};
use crate::analysis::{layer_flow, FlowRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub path: PathBuf,
}

/// `{"checkpoints": [{"step": ..., "path": ...}]}`. Relative paths are
/// relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checkpoints: Vec<CheckpointEntry>,
}

impl CheckpointManifest {
    /// Loads the manifest and resolves every path; entries come back
    /// sorted by step.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut m: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        if m.checkpoints.is_empty() {
            return Err(HarnessError::Data(format!(
                "{}: no checkpoints",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut m.checkpoints {
            if c.path.is_relative() {
                c.path = base.join(&c.path);
            }
        }
        m.checkpoints.sort_by_key(|c| c.step);
        Ok(m)
    }
}

/// Layer-flow records for `tokens` at every checkpoint, tagged by step.
pub fn flow_over_checkpoints(
    manifest: &CheckpointManifest,
    tokens: &[u32],
) -> Result<Vec<(Option<u64>, FlowRecord)>, HarnessError> {
    let mut out = Vec::new();
    for c in &manifest.checkpoints {
        let model = load_model(&c.path)?;
        out.extend(
            layer_flow(&model, tokens)?
                .into_iter()
                .map(|r| (Some(c.step), r)),
        );
    }
    Ok(out)
}
