//! Run manifest written next to every training run's outputs.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use lgd_core::datagen::{GraphBundle, LabelMode};
use lgd_core::model::{GcnConfig, ModelConfig};
use lgd_core::train::TrainConfig;

#[derive(Serialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelSpec {
    Lgd(ModelConfig),
    Gcn(GcnConfig),
}

#[derive(Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub path: String,
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
    pub multi_label: bool,
    /// `sha256:` of the bundle file, hashed git-style (`blob <len>\0` prefix).
    pub content_hash: String,
}

impl DatasetInfo {
    pub fn new(bundle: &GraphBundle, path: &Path, bytes: &[u8]) -> Self {
        Self {
            name: bundle.name.clone(),
            path: path.display().to_string(),
            nodes: bundle.num_nodes(),
            edges: bundle.graph.num_edges(),
            features: bundle.feature_dim(),
            classes: bundle.num_classes,
            multi_label: bundle.label_mode() == LabelMode::Multi,
            content_hash: content_hash(bytes),
        }
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{:x}", h.finalize())
}

/// Resolved configuration of one run; together with the bundle it
/// determines every output.
#[derive(Serialize)]
pub struct RunManifest {
    pub schema: u32,
    pub preset: Option<String>,
    pub seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dataset: DatasetInfo,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_scheme() {
        // sha256 of "blob 0\0", the object id of an empty blob in sha256 repositories
        assert_eq!(
            content_hash(b""),
            "sha256:473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
