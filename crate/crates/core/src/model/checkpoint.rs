//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSTCKPT1"
//! u32 line_count, then per line: u32 byte_len, UTF-8 "key=value"
//! u32 param_count, then per parameter:
//!     u32 name_len, name, u32 rank, rank x u64 extent, numel x f64
//! ```

use super::config::ModelConfig;
use super::params::{parameter_shapes, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SSTCKPT1";

pub fn encode(cfg: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let lines: Vec<String> = cfg.to_pairs().iter().map(|(k, v)| format!("{k}={v}")).collect();
    out.extend_from_slice(&(lines.len() as u32).to_le_bytes());
    for line in &lines {
        out.extend_from_slice(&(line.len() as u32).to_le_bytes());
        out.extend_from_slice(line.as_bytes());
    }
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, format!("checkpoint truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::parse(at, "invalid UTF-8"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::parse(0, "bad checkpoint magic (expected SSTCKPT1)"));
    }
    let mut cfg = ModelConfig::default();
    let mut seen = Vec::new();
    for _ in 0..r.u32()? {
        let at = r.pos;
        let line = r.text()?;
        let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(at, format!("header line `{line}` lacks `=`")))?;
        let v: usize = v.parse().map_err(|_| Error::parse(at, format!("non-numeric value in `{line}`")))?;
        cfg.set(k, v).map_err(|e| Error::parse(at, e.to_string()))?;
        seen.push(k.to_string());
    }
    for (k, _) in cfg.to_pairs() {
        if !seen.iter().any(|s| s == k) {
            return Err(Error::parse(r.pos, format!("checkpoint header lacks `{k}`")));
        }
    }
    cfg.validate().map_err(|e| Error::parse(r.pos, e.to_string()))?;

    let expected = parameter_shapes(&cfg);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::parse(r.pos, format!("expected {} parameters, found {count}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let at = r.pos;
        let got = r.text()?;
        if &got != name {
            return Err(Error::parse(at, format!("expected parameter `{name}`, found `{got}`")));
        }
        let rank = r.u32()? as usize;
        let extents = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if &extents != shape {
            return Err(Error::parse(at, format!("`{name}` has shape {extents:?}, expected {shape:?}")));
        }
        let n: usize = extents.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(extents, data)?.with_grad());
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after last parameter"));
    }
    let params = ModelParams::from_ordered(&cfg, tensors);
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(cfg, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    decode(&std::fs::read(path)?)
}
