//! Structured run reports: versioned JSON with provenance, plus atomic file
//! writes. Reports never embed wall-clock state, so re-running a command from
//! its echoed config yields byte-identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub checkpoints: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub manifest_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extractor: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub provenance: Provenance,
    pub metrics: serde_json::Value,
}

impl ReportFile {
    pub fn new(
        command: &str,
        config_hash: String,
        provenance: Provenance,
        metrics: serde_json::Value,
    ) -> Self {
        ReportFile {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            config_hash,
            provenance,
            metrics,
        }
    }

    pub fn to_json(&self) -> String {
        // serde_json's default map is ordered, so bytes are reproducible
        serde_json::to_string_pretty(self).expect("report serialization") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

/// Hex SHA-256 with an algorithm prefix.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(7 + 2 * digest.len());
    out.push_str("sha256:");
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// JSON value for a metric that may carry the infinity sentinel.
pub fn metric_value(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        serde_json::Value::String(if v > 0.0 { "+inf" } else { "-inf" }.to_string())
    } else {
        serde_json::json!(v)
    }
}

/// Write via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
