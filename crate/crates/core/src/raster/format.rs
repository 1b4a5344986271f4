//! Raster tensor files: one JSON header line, then the raw little-endian f32
//! payload in row-major order.
//!
//! ```text
//! {"shape":[2,3,4],"dtype":"f32","order":"CHW"}\n<96 bytes>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

/// Serializes `t` into the raster tensor byte layout.
pub fn encode_raster(t: &Tensor) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::NonFinite("refusing to write a raster with NaN/Inf".into()));
    }
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        order: "CHW".into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the raster tensor byte layout. `origin` only labels errors.
pub fn decode_raster(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(origin, format!("unknown dtype {:?}", header.dtype)));
    }
    if header.order != "CHW" {
        return Err(Error::format(origin, format!("unknown order {:?}", header.order)));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::format(origin, format!("invalid shape {:?}", header.shape)));
    }
    let n = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(origin, "shape overflows"))?;
    let payload = &bytes[nl + 1..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            origin,
            format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                n * 4
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&header.shape, data)
}

pub fn write_raster(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raster(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}
