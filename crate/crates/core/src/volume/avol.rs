//! AVOL: a minimal little-endian volume container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "AVOL"
//!      4     4  version (u32, = 1)
//!      8     4  dtype (u32: 0 = f32 intensity, 1 = u16 labels)
//!     12     4  num_labels (u32, 0 for intensity)
//!     16    12  dims (u32 x 3, order x y z)
//!     28    12  spacing (f32 x 3)
//!     40     -  payload, x-fastest
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{GridSpec, Label, LabelMap, Volume, VolumeError};

pub const MAGIC: &[u8; 4] = b"AVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

const DTYPE_F32: u32 = 0;
const DTYPE_U16: u32 = 1;

#[derive(Debug, Error)]
pub enum AvolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype {0}")]
    UnknownDtype(u32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload size mismatch: dims require {expected} bytes, file holds {found}")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("num_labels {0} does not fit the label dtype")]
    InvalidNumLabels(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(#[from] VolumeError),
    #[error("expected {expected} file, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Decoded contents of an AVOL file.
#[derive(Debug, Clone, PartialEq)]
pub enum AvolData {
    Intensity(Volume),
    Labels(LabelMap),
}

impl AvolData {
    fn kind(&self) -> &'static str {
        match self {
            AvolData::Intensity(_) => "intensity",
            AvolData::Labels(_) => "label",
        }
    }

    pub fn into_volume(self) -> Result<Volume, AvolError> {
        match self {
            AvolData::Intensity(v) => Ok(v),
            other => Err(AvolError::WrongKind {
                expected: "intensity",
                found: other.kind(),
            }),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap, AvolError> {
        match self {
            AvolData::Labels(l) => Ok(l),
            other => Err(AvolError::WrongKind {
                expected: "label",
                found: other.kind(),
            }),
        }
    }
}

impl From<Volume> for AvolData {
    fn from(v: Volume) -> Self {
        AvolData::Intensity(v)
    }
}

impl From<LabelMap> for AvolData {
    fn from(l: LabelMap) -> Self {
        AvolData::Labels(l)
    }
}

fn header(dtype: u32, num_labels: u32, grid: &GridSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&num_labels.to_le_bytes());
    for d in grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode(data: &AvolData) -> Vec<u8> {
    match data {
        AvolData::Intensity(v) => {
            let mut out = header(DTYPE_F32, 0, v.grid());
            out.reserve(v.data().len() * 4);
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
        AvolData::Labels(l) => {
            let mut out = header(DTYPE_U16, l.num_labels() as u32, l.grid());
            out.reserve(l.labels().len() * 2);
            for x in l.labels() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<AvolData, AvolError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(AvolError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(AvolError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(AvolError::UnsupportedVersion(version));
    }
    let dtype = u32_at(bytes, 8);
    let num_labels = u32_at(bytes, 12);
    let dims = [16, 20, 24].map(|o| u32_at(bytes, o) as usize);
    let spacing = [28, 32, 36].map(|o| f32_at(bytes, o));
    let grid = GridSpec::new(dims, spacing)?;
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U16 => 2,
        other => return Err(AvolError::UnknownDtype(other)),
    };
    let expected = grid.len() * elem;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(AvolError::Truncated {
            expected: HEADER_LEN + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(AvolError::PayloadMismatch {
            expected,
            found: payload.len(),
        });
    }
    match dtype {
        DTYPE_F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AvolData::Intensity(Volume::new(grid, data)?))
        }
        _ => {
            let num_labels = Label::try_from(num_labels).map_err(|_| AvolError::InvalidNumLabels(num_labels))?;
            let labels = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AvolData::Labels(LabelMap::new(grid, labels, num_labels)?))
        }
    }
}

pub fn write_avol(path: impl AsRef<Path>, data: &AvolData) -> Result<(), AvolError> {
    fs::write(path, encode(data))?;
    Ok(())
}

pub fn read_avol(path: impl AsRef<Path>) -> Result<AvolData, AvolError> {
    decode(&fs::read(path)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, AvolError> {
    read_avol(path)?.into_volume()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap, AvolError> {
    read_avol(path)?.into_labels()
}
