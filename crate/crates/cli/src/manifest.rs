use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to audit a run. Field order is fixed, so the
/// serialized form depends only on the config, the seed and the tool
/// version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// The resolved config, without the output directory.
    pub config: RunConfig,
    pub variants: Vec<VariantEntry>,
    pub images: Vec<ImageEntry>,
    /// Every emitted file except the manifest, in write order.
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantEntry {
    pub name: String,
    pub label: String,
}

/// Normalization bounds of a final image: pixel `p` maps back to
/// `min + p / 255 * (max - min)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub variant: String,
    pub path: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

impl FileEntry {
    pub fn new(path: &str, bytes: &[u8]) -> Self {
        Self { path: path.to_string(), sha256: hex::encode(Sha256::digest(bytes)) }
    }
}

impl Manifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}
