//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "STQE" | version u32 | component u8
//! k u32 | sigma2 f64 | leaky_slope f64 | flags u8 (bit0 squared kernel, bit1 shared branch)
//! width count u32 | widths u32...
//! tensor count u32 | per tensor: name_len u32, name, rank u32, extents u32..., f32 values
//! ```

use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use super::params::{ModelConfig, ModelParams, Widths};
use crate::error::{Error, Result};
use crate::pcdata::Component;
use crate::tensorad::Tensor;

pub const MAGIC: &[u8; 4] = b"STQE";
pub const VERSION: u32 = 1;

const MAX_TENSORS: u32 = 4096;
const MAX_NAME: u32 = 1024;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(params.component.index() as u8);
    out.extend_from_slice(&(cfg.k as u32).to_le_bytes());
    out.extend_from_slice(&cfg.sigma2.to_le_bytes());
    out.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    out.push(u8::from(cfg.squared_kernel) | (u8::from(cfg.shared_branch) << 1));
    let table = cfg.widths.to_table();
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for w in table {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {} reading {what}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// One tensor entry as laid out in the file.
#[derive(Clone, Debug, Serialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

/// Decoded header and tensor table, for `describe-checkpoint`.
#[derive(Clone, Debug, Serialize)]
pub struct CheckpointLayout {
    pub version: u32,
    pub component: Component,
    pub config: ModelConfig,
    pub param_count: usize,
    pub file_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

fn parse(bytes: &[u8]) -> Result<(CheckpointLayout, ModelParams)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an STQE checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cid = r.u8("component")?;
    let component = Component::from_index(cid as usize)
        .ok_or_else(|| Error::Checkpoint(format!("invalid component id {cid}")))?;
    let k = r.u32("k")? as usize;
    let sigma2 = r.f64("sigma2")?;
    let leaky_slope = r.f64("leaky_slope")?;
    let flags = r.u8("flags")?;
    if flags > 3 {
        return Err(Error::Checkpoint(format!("unknown flag bits {flags:#04x}")));
    }
    let nw = r.u32("width count")?;
    if nw > 64 {
        return Err(Error::Checkpoint(format!("width table too long ({nw})")));
    }
    let table = (0..nw).map(|_| r.u32("width")).collect::<Result<Vec<_>>>()?;
    let widths = Widths::from_table(&table).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = ModelConfig {
        k,
        sigma2,
        leaky_slope,
        squared_kernel: flags & 1 != 0,
        shared_branch: flags & 2 != 0,
        widths,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let nt = r.u32("tensor count")?;
    if nt > MAX_TENSORS {
        return Err(Error::Checkpoint(format!("too many tensors ({nt})")));
    }
    let mut tensors = IndexMap::new();
    let mut entries = Vec::new();
    for _ in 0..nt {
        let len = r.u32("name length")?;
        if len == 0 || len > MAX_NAME {
            return Err(Error::Checkpoint(format!("invalid tensor name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        if !(1..=3).contains(&rank) {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} not in 1..=3")));
        }
        let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n <= r.remaining() / 4)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} does not fit the file")))?;
        let offset = r.pos;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        entries.push(TensorEntry { name, shape, offset, bytes: numel * 4 });
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    let params = ModelParams { config: config.clone(), component, tensors };
    params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layout = CheckpointLayout {
        version,
        component,
        config,
        param_count: params.param_count(),
        file_bytes: bytes.len(),
        tensors: entries,
    };
    Ok((layout, params))
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    parse(bytes).map(|(_, p)| p)
}

pub fn describe(bytes: &[u8]) -> Result<CheckpointLayout> {
    parse(bytes).map(|(l, _)| l)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode(&std::fs::read(path)?)
}
