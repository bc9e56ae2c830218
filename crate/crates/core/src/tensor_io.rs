//! Flat binary array files shared by adapter checkpoints and retrieval indexes.
//!
//! Layout: magic `QCTA`, `u32` rank, `rank` x `u64` dimensions, then the
//! values as little-endian `f32` in row-major order.

use std::fs;
use std::io;
use std::path::Path;

const MAGIC: &[u8; 4] = b"QCTA";

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

/// Dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value mismatch"
        );
        Self { shape, values }
    }
}

pub fn encode(array: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * array.shape.len() + 4 * array.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(array.shape.len() as u32).to_le_bytes());
    for &d in &array.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &array.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Array, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("missing array header".into());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err("truncated shape header".into());
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 8 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(format!(
            "expected {} value bytes for shape {:?}, found {}",
            4 * count,
            shape,
            bytes.len() - header
        ));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array { shape, values })
}

pub fn write(path: &Path, array: &Array) -> Result<(), TensorIoError> {
    fs::write(path, encode(array)).map_err(|source| TensorIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path) -> Result<Array, TensorIoError> {
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes).map_err(|reason| TensorIoError::Format {
        path: path.display().to_string(),
        reason,
    })
}
