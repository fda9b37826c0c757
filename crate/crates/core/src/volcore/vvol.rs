//! VVOL: one JSON header line, then `D·H·W` little-endian `f32` intensities
//! (z, then y, then x), then optionally `D·H·W` mask bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{voxel_count, Mask, Volume};
use crate::archive::write_atomic;
use crate::error::{Error, Result};

pub const VVOL_MAGIC: &str = "VVOL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VvolHeader {
    pub magic: String,
    pub shape: [usize; 3],
    pub dtype: String,
    pub has_mask: bool,
    pub spacing: Option<[f64; 3]>,
    pub id: String,
}

pub fn write_vvol_bytes(v: &Volume, m: Option<&Mask>) -> Result<Vec<u8>> {
    if let Some(m) = m {
        if m.dims() != v.dims() {
            return Err(Error::Shape(format!("mask {:?} vs volume {:?}", m.dims(), v.dims())));
        }
    }
    let header = VvolHeader {
        magic: VVOL_MAGIC.into(),
        shape: v.dims(),
        dtype: "f32".into(),
        has_mask: m.is_some(),
        spacing: v.spacing,
        id: v.id.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(v.data().len() * 5);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(m) = m {
        out.extend_from_slice(m.data());
    }
    Ok(out)
}

pub fn read_vvol_bytes(bytes: &[u8]) -> Result<(Volume, Option<Mask>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Truncated("header line is not terminated".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Header(e.to_string()))?;
    let magic = value.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    if magic != VVOL_MAGIC {
        return Err(Error::BadMagic { expected: VVOL_MAGIC.into(), found: magic.into() });
    }
    let header: VvolHeader =
        serde_json::from_value(value).map_err(|e| Error::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(Error::Header(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.shape.contains(&0) {
        return Err(Error::Header(format!("degenerate shape {:?}", header.shape)));
    }
    let n = voxel_count(header.shape);
    let payload = &bytes[nl + 1..];
    let expected = n * 4 + if header.has_mask { n } else { 0 };
    if payload.len() != expected {
        // Cut inside the intensity block, mid-value: the stream was truncated.
        if payload.len() < n * 4 && !payload.len().is_multiple_of(4) {
            return Err(Error::Truncated(format!(
                "payload ends mid-value after {} bytes",
                payload.len()
            )));
        }
        return Err(Error::LengthMismatch { expected, found: payload.len() });
    }
    let data = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut volume = Volume::new(header.shape, data, header.id)?;
    volume.spacing = header.spacing;
    let mask = if header.has_mask {
        Some(Mask::new(header.shape, payload[n * 4..].to_vec())?)
    } else {
        None
    };
    Ok((volume, mask))
}

pub fn write_vvol(v: &Volume, m: Option<&Mask>, path: &Path) -> Result<()> {
    write_atomic(path, &write_vvol_bytes(v, m)?)
}

pub fn read_vvol(path: &Path) -> Result<(Volume, Option<Mask>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_vvol_bytes(&bytes)
}
