//! Binary tensor container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "EEGT"
//! 4       4         format version, u32 LE (= 1)
//! 8       1         dtype code: 1 = f32, 2 = f64
//! 9       1         ndim
//! 10      4·ndim    dims, u32 LE each
//! ..      n·size    payload, little-endian, row-major
//! ```
//!
//! Checkpoints bundle several named records:
//!
//! ```text
//! "EEGC" | version u32 | count u32 | count × (name_len u32 | name UTF-8 | EEGT record)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EEGT";
pub const BUNDLE_MAGIC: &[u8; 4] = b"EEGC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Serializes one record.
pub fn encode(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if !tensor.is_finite() {
        return Err(Error::NumericFault {
            op: "tensor_write".into(),
        });
    }
    if tensor.ndim() > u8::MAX as usize {
        return Err(Error::InvalidShape {
            op: "tensor_write",
            shape: tensor.shape().to_vec(),
            reason: "too many axes".into(),
        });
    }
    let mut out = Vec::with_capacity(10 + 4 * tensor.ndim() + tensor.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape {
            op: "tensor_write",
            shape: tensor.shape().to_vec(),
            reason: "extent exceeds u32".into(),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("header truncated at byte {at}"),
    })
}

/// Parses one record from the front of `bytes`; returns the tensor, its
/// stored dtype, and the number of bytes consumed. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Tensor, DType, usize)> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let magic = take(bytes, 0, 4, path)?;
    if magic != MAGIC {
        return Err(fmt(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, path)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(take(bytes, 8, 1, path)?[0])
        .ok_or_else(|| fmt(format!("unknown dtype code {}", bytes[8])))?;
    let ndim = take(bytes, 9, 1, path)?[0] as usize;
    if ndim == 0 {
        return Err(fmt("zero-dimensional record".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let d = u32::from_le_bytes(take(bytes, 10 + 4 * i, 4, path)?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fmt("zero extent".into()));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| fmt("dimension product overflows".into()))?;
        dims.push(d);
    }
    let header = 10 + 4 * ndim;
    let expected = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| fmt("payload size overflows".into()))?;
    let available = bytes.len() - header;
    if available < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: available,
        });
    }
    let payload = &bytes[header..header + expected];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::new(&dims, data)?, dtype, header + expected))
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode(tensor, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a single-record file. The whole record must be present and no
/// bytes may trail it.
pub fn read_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, dtype, used) = decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: used - 10,
            found: bytes.len() - 10,
        });
    }
    Ok((t, dtype))
}

/// Serializes named tensors into a bundle.
pub fn encode_bundle(entries: &[(String, Tensor)], dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend(encode(t, dtype)?);
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8], path: &Path) -> Result<(Vec<(String, Tensor)>, DType)> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if take(bytes, 0, 4, path)? != BUNDLE_MAGIC {
        return Err(fmt("bad bundle magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, path)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported bundle version {version}")));
    }
    let count = u32::from_le_bytes(take(bytes, 8, 4, path)?.try_into().unwrap()) as usize;
    let mut at = 12;
    let mut entries = Vec::with_capacity(count.min(4096));
    let mut dtype = None;
    for _ in 0..count {
        let len = u32::from_le_bytes(take(bytes, at, 4, path)?.try_into().unwrap()) as usize;
        at += 4;
        let name = std::str::from_utf8(take(bytes, at, len, path)?)
            .map_err(|_| fmt("tensor name is not UTF-8".into()))?
            .to_string();
        at += len;
        let (t, dt, used) = decode(&bytes[at..], path)?;
        at += used;
        dtype.get_or_insert(dt);
        entries.push((name, t));
    }
    if at != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok((entries, dtype.unwrap_or(DType::F64)))
}
