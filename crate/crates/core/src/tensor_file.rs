//! The "UPMF" tensor container.
//!
//! Layout: magic `UPMF`, then little-endian `u32` version, `h`, `w`, `c`,
//! then `h*w*c` little-endian IEEE-754 values, `h` outermost and `c`
//! innermost. Version 1 stores `f32` (feature maps); version 2 stores `f64`
//! and is used for checkpoint tensors so that resumed training is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UPMF";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;
const HEADER_LEN: usize = 20;

/// Height x width x channels of a feature map (or any 3-d tensor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Dims { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.h, self.w, self.c)
    }
}

fn header(version: u32, dims: Dims) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    for d in [dims.h, dims.w, dims.c] {
        let d = u32::try_from(d)
            .map_err(|_| Error::ShapeMismatch(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    if dims.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "dims {dims} hold {} values, got {len}",
            dims.len()
        )));
    }
    Ok(())
}

pub fn write_f32(path: &Path, dims: Dims, data: &[f32]) -> Result<()> {
    check_len(dims, data.len())?;
    let mut bytes = header(VERSION_F32, dims)?;
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn write_f64(path: &Path, dims: Dims, data: &[f64]) -> Result<()> {
    check_len(dims, data.len())?;
    let mut bytes = header(VERSION_F64, dims)?;
    bytes.reserve(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Decoded payload of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

fn read_raw(path: &Path) -> Result<(u32, Dims, Vec<u8>)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    let dims = Dims::new(word(2) as usize, word(3) as usize, word(4) as usize);
    Ok((version, dims, bytes))
}

/// Reads any tensor file, returning its dims and payload. Non-finite values
/// are rejected.
pub fn read(path: &Path) -> Result<(Dims, Payload)> {
    let (version, dims, bytes) = read_raw(path)?;
    let width = match version {
        VERSION_F32 => 4,
        VERSION_F64 => 8,
        v => {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version: v,
            })
        }
    };
    let expected = HEADER_LEN + dims.len() * width;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Validation(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let body = &bytes[HEADER_LEN..];
    let non_finite = |index| Error::NonFiniteValue {
        path: path.to_path_buf(),
        index,
    };
    let payload = if width == 4 {
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(non_finite(i));
        }
        Payload::F32(data)
    } else {
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(non_finite(i));
        }
        Payload::F64(data)
    };
    Ok((dims, payload))
}

/// Reads a version-1 file and checks its header against `expected`.
pub fn read_f32(path: &Path, expected: Dims) -> Result<Vec<f32>> {
    let (version, dims, _) = read_raw(path)?;
    if dims != expected {
        return Err(Error::DimMismatch {
            expected: expected.to_string(),
            found: dims.to_string(),
        });
    }
    if version != VERSION_F32 {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    match read(path)?.1 {
        Payload::F32(v) => Ok(v),
        Payload::F64(_) => unreachable!("version checked above"),
    }
}

/// Reads a version-2 file and checks its header against `expected`.
pub fn read_f64(path: &Path, expected: Dims) -> Result<Vec<f64>> {
    let (dims, payload) = read(path)?;
    if dims != expected {
        return Err(Error::DimMismatch {
            expected: expected.to_string(),
            found: dims.to_string(),
        });
    }
    match payload {
        Payload::F64(v) => Ok(v),
        Payload::F32(_) => Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: VERSION_F32,
        }),
    }
}
