//! AWTS weights files.
//!
//! Little-endian: magic `"AWTS"`, `u32` version, `u32` config length followed by the
//! config as JSON, `u32` tensor count, then per tensor `u32` name length, name bytes,
//! `u32` ndim, `u32` dims, and the `f32` payload.

use std::fs;
use std::path::Path;

use super::unet::{tensor_names, UNetConfig, UNetParams};
use super::NnError;

pub const MAGIC: &[u8; 4] = b"AWTS";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_weights(params: &UNetParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    let named = params.named_tensors();
    put_u32(&mut out, named.len());
    for (name, t) in named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Weights(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<UNetParams<f32>, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(NnError::Weights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(NnError::Weights(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let config: UNetConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| NnError::Weights(format!("config: {e}")))?;
    config.validate()?;
    // Build a zero-valued skeleton and fill it tensor by tensor.
    let mut params = UNetParams::<f32>::init(config, &mut crate::rng::seeded(0))?;
    let names = tensor_names(&config);
    let count = r.u32()?;
    if count != names.len() {
        return Err(NnError::Weights(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    for (expected, t) in names.iter().zip(params.tensors_mut()) {
        let len = r.u32()?;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| NnError::Weights("tensor name is not utf-8".into()))?;
        if name != expected {
            return Err(NnError::Weights(format!("expected tensor {expected}, found {name}")));
        }
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if dims != t.shape() {
            return Err(NnError::Weights(format!(
                "tensor {name} has shape {dims:?}, expected {:?}",
                t.shape()
            )));
        }
        let payload = r.take(t.len() * 4)?;
        for (dst, c) in t.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::Weights("trailing bytes".into()));
    }
    Ok(params)
}

pub fn write_weights(path: impl AsRef<Path>, params: &UNetParams<f32>) -> Result<(), NnError> {
    fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<UNetParams<f32>, NnError> {
    decode_weights(&fs::read(path)?)
}
