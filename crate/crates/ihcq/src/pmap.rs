//! PMAP container: a JSON header plus a sibling `.bin` of planar
//! little-endian `f32` probabilities.

use std::path::{Path, PathBuf};

use ihcq_core::inference::{ProbabilityMap, CLASS_NAMES};
use ihcq_core::slide::ResolutionSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmapHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub mpp: f64,
    pub dtype: String,
    pub layout: String,
    pub class_names: Vec<String>,
}

impl PmapHeader {
    pub fn for_map(map: &ProbabilityMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            channels: 3,
            mpp: map.mpp().mpp(),
            dtype: "f32le".into(),
            layout: "planar".into(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |m: String| Err(Error::format(path, m));
        if self.channels != 3 {
            return bad(format!("channels must be 3, got {}", self.channels));
        }
        if self.dtype != "f32le" {
            return bad(format!("unsupported dtype {:?}", self.dtype));
        }
        if self.layout != "planar" {
            return bad(format!("unsupported layout {:?}", self.layout));
        }
        if self.class_names != CLASS_NAMES {
            return bad(format!("class_names must be {CLASS_NAMES:?}"));
        }
        Ok(())
    }
}

/// Payload path for a header path: same stem, `.bin` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Write payload then header, each atomically.
pub fn write_pmap(path: &Path, map: &ProbabilityMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.data().len() * 4);
    for v in map.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fsutil::write_atomic(&payload_path(path), &bytes)?;
    let header = serde_json::to_vec_pretty(&PmapHeader::for_map(map))
        .map_err(|e| Error::format(path, e))?;
    fsutil::write_atomic(path, &header)
}

/// Read and validate a PMAP. Normalization violations name the pixel.
pub fn read_pmap(path: &Path) -> Result<ProbabilityMap> {
    let header: PmapHeader = serde_json::from_slice(&fsutil::read(path)?)
        .map_err(|e| Error::format(path, e))?;
    header.check(path)?;
    let mpp = ResolutionSpec::new(header.mpp)?;
    let bin = payload_path(path);
    let bytes = fsutil::read(&bin)?;
    let expected = header.width as usize * header.height as usize * 3 * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &bin,
            format!(
                "payload is {} bytes, header {}x{}x3 f32 needs {expected}",
                bytes.len(),
                header.width,
                header.height
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ProbabilityMap::new(header.width, header.height, mpp, data)?)
}
