//! On-disk tensor format shared by dataset shards and checkpoints:
//! a one-line JSON header followed by the raw little-endian buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{AdrnnError, Result};
use crate::tape::Scalar;

pub const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorHeader {
    pub format_version: u32,
    pub dtype: String,
    pub shape: Vec<usize>,
}

/// Encode values as little-endian bytes. Only f32/f64 exist, selected
/// by `Scalar::DTYPE`.
pub fn to_le_bytes<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    match T::DTYPE {
        "f32" => {
            for v in values {
                out.extend_from_slice(&(v.to_f32().expect("f32")).to_le_bytes());
            }
        }
        "f64" => {
            for v in values {
                out.extend_from_slice(&(v.to_f64().expect("f64")).to_le_bytes());
            }
        }
        other => unreachable!("dtype {other}"),
    }
    out
}

pub fn from_le_bytes<T: Scalar>(bytes: &[u8], dtype: &str) -> Result<Vec<T>> {
    match dtype {
        "f32" => {
            if bytes.len() % 4 != 0 {
                return Err(AdrnnError::ShardFormat("truncated f32 buffer".into()));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).expect("f32"))
                .collect())
        }
        "f64" => {
            if bytes.len() % 8 != 0 {
                return Err(AdrnnError::ShardFormat("truncated f64 buffer".into()));
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| {
                    T::from_f64(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]))
                    .expect("f64")
                })
                .collect())
        }
        other => Err(AdrnnError::ShardFormat(format!("unknown dtype '{other}'"))),
    }
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &ArrayD<T>) -> Result<()> {
    let header = TensorHeader {
        format_version: TENSOR_FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        shape: t.shape().to_vec(),
    };
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    f.write_all(&to_le_bytes(t.as_slice().expect("contiguous")))?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut all = Vec::new();
    f.read_to_end(&mut all)?;
    let nl = all
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| AdrnnError::ShardFormat("missing tensor header".into()))?;
    let header: TensorHeader = serde_json::from_slice(&all[..nl])?;
    if header.format_version != TENSOR_FORMAT_VERSION {
        return Err(AdrnnError::FormatVersion {
            found: header.format_version,
            expected: TENSOR_FORMAT_VERSION,
        });
    }
    let values = from_le_bytes::<T>(&all[nl + 1..], &header.dtype)?;
    let expected: usize = header.shape.iter().product();
    if values.len() != expected {
        return Err(AdrnnError::ShardFormat(format!(
            "buffer length {} does not match shape {:?}",
            values.len(),
            header.shape
        )));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&header.shape), values).expect("shape"))
}

/// IEEE CRC-32 (reflected, poly 0xEDB88320), used by shard manifests.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}
