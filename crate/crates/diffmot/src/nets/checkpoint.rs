//! Checkpoint format shared by the trainer and the tracker.
//!
//! Layout: 4-byte magic `LDTK`, a little-endian u32 format version, a
//! little-endian u64 manifest length, the JSON manifest listing
//! (name, shape, offset) per parameter, then the concatenated values as
//! little-endian IEEE-754 64-bit floats. Offsets are element indices into
//! the data section.

use super::NetError;
use crate::ndgrad::Array;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDTK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

pub fn save_checkpoint(values: &BTreeMap<String, Array>, path: &Path) -> Result<(), NetError> {
    let mut entries = Vec::with_capacity(values.len());
    let mut offset = 0usize;
    for (name, arr) in values {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
        });
        offset += arr.len();
    }
    let manifest = serde_json::to_vec(&Manifest { params: entries })
        .map_err(|e| NetError::Checkpoint(e.to_string()))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(manifest.len() as u64).to_le_bytes())?;
    file.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for arr in values.values() {
        for v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Array>, NetError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint file",
            magic
        )));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let manifest_len = u64::from_le_bytes(len) as usize;
    let mut manifest_buf = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_buf)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_buf)
        .map_err(|e| NetError::Checkpoint(format!("manifest parse: {e}")))?;

    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(NetError::Checkpoint("truncated data section".into()));
    }
    let floats: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut values = BTreeMap::new();
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if end > floats.len() {
            return Err(NetError::Checkpoint(format!(
                "parameter '{}' extends past the data section",
                entry.name
            )));
        }
        values.insert(
            entry.name,
            Array::from_vec(entry.shape, floats[entry.offset..end].to_vec()),
        );
    }
    Ok(values)
}
