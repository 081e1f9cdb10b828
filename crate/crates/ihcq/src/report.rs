//! Run manifests and JSON reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const TOOL: &str = "ihcq";

/// Everything needed to reproduce a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Subcommand and its flags, without `--out`, `--config` and `--workers`.
    pub command: Vec<String>,
    /// Effective configuration after file and flag overrides.
    pub config: serde_json::Value,
    /// Input path (as given) to lowercase hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub manifest: RunManifest,
    pub result: serde_json::Value,
}

/// Creation time: `SOURCE_DATE_EPOCH` when set, else the clock.
pub fn now_unix() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Digest every input; paths are recorded as given.
pub fn digest_inputs<P: AsRef<Path>>(paths: &[P]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            Ok((p.to_string_lossy().into_owned(), fsutil::sha256_file(p)?))
        })
        .collect()
}

/// Fail if any recorded input no longer hashes to its recorded digest.
pub fn verify_inputs(inputs: &BTreeMap<String, String>) -> Result<()> {
    for (path, expected) in inputs {
        let actual = fsutil::sha256_file(Path::new(path))?;
        if &actual != expected {
            return Err(Error::DigestMismatch {
                path: path.clone(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    Ok(())
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

pub fn read_report(path: &Path) -> Result<Report> {
    serde_json::from_slice(&fsutil::read(path)?).map_err(|e| Error::format(path, e))
}
