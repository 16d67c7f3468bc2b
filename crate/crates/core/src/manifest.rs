//! Run manifests: enough provenance to reproduce a run bit-for-bit — the
//! config hash, the effective seed, module versions, and the dataset
//! checksum. Timestamps are deliberately omitted so a rerun of the same
//! configuration produces an identical manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checksum of the dataset's canonical CSV serialization.
pub fn dataset_checksum(ds: &Dataset) -> String {
    let mut text = String::new();
    for j in 0..ds.dim() {
        write!(text, "x{j},").unwrap();
    }
    text.push_str("y\n");
    for i in 0..ds.len() {
        for v in ds.x(i) {
            write!(text, "{v},").unwrap();
        }
        writeln!(text, "{}", ds.y(i)).unwrap();
    }
    sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_digest: Option<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("resnet-lab-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config_bytes),
            seed,
            versions,
            dataset_sha256: None,
            trace_digest: None,
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
