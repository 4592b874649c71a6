use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetTag, VolumeRecord};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"TVOOVOL1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub tag: DatasetTag,
    pub seed: u64,
    pub dtype: String,
}

/// Encodes a record: magic, u32 LE header length, JSON header, f32 LE voxels.
///
/// Voxels are stored as f32; values that are not f32-representable are rounded.
pub fn encode_volume(rec: &VolumeRecord) -> Result<Vec<u8>> {
    let s = rec.voxels.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("volume must be [D, H, W], got {s:?}")));
    }
    let header = VolumeHeader {
        dims: [s[0], s[1], s[2]],
        tag: rec.tag,
        seed: rec.seed,
        dtype: "f32".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * rec.voxels.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in rec.voxels.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeRecord> {
    if bytes.len() < 12 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::Format("not a TVOOVOL1 volume (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format("truncated volume header".into()))?;
    let header: VolumeHeader = serde_json::from_slice(body)
        .map_err(|e| Error::Format(format!("bad volume header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!(
            "unsupported volume dtype {:?}",
            header.dtype
        )));
    }
    let n: usize = header.dims.iter().product();
    let payload = &bytes[12 + len..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "volume payload has {} bytes, expected {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(VolumeRecord {
        voxels: DenseTensor::new(header.dims.to_vec(), data)?,
        tag: header.tag,
        seed: header.seed,
    })
}

pub fn write_volume(path: &Path, rec: &VolumeRecord) -> Result<()> {
    fs::write(path, encode_volume(rec)?).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeRecord> {
    decode_volume(&fs::read(path).map_err(|e| Error::file(path, e))?)
}
