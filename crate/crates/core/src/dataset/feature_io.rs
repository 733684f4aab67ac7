//! `.dpvf` voxel feature files: a 16-byte header (magic `DPVF`, version, S, C
//! as u32 little-endian) followed by `S³·C` f32 little-endian values in the
//! feature's linear order. A JSON sidecar at `<path>.json` records provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruction::VoxelFeature;

const MAGIC: &[u8; 4] = b"DPVF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn save_feature<P: AsRef<Path>>(f: &VoxelFeature, path: P) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + f.values.len() * 4);
    bytes.extend_from_slice(MAGIC);
    for v in [VERSION, f.size as u32, f.channels as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_feature<P: AsRef<Path>>(path: P) -> Result<VoxelFeature> {
    decode(&fs::read(path)?)
}

fn decode(bytes: &[u8]) -> Result<VoxelFeature> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile { expected: HEADER_LEN, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a voxel feature file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    if word(1) != VERSION as usize {
        return Err(Error::Format(format!("unsupported feature file version {}", word(1))));
    }
    let (size, channels) = (word(2), word(3));
    let count = size
        .checked_pow(3)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("feature dimensions overflow".into()))?;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile { expected, found: bytes.len() });
    }
    let values = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VoxelFeature::from_values(size, channels, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub object_id: String,
    pub d_real: f64,
    /// Manifest frame ids used as references.
    pub references: Vec<usize>,
    /// Manifest the references came from, relative to the feature file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

pub fn sidecar_path(feature: &Path) -> PathBuf {
    let mut s = feature.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_sidecar<P: AsRef<Path>>(sidecar: &FeatureSidecar, feature: P) -> Result<()> {
    fs::write(sidecar_path(feature.as_ref()), serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(())
}

/// Sidecar of a feature file, if one exists.
pub fn load_sidecar<P: AsRef<Path>>(feature: P) -> Result<Option<FeatureSidecar>> {
    let p = sidecar_path(feature.as_ref());
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Parse { path: p, message: e.to_string() })
}
