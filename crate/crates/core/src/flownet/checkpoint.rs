//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `NFCK`, `u32` version, `u32` config length,
//! config JSON, `u32` tensor count, then per tensor `u32` name length,
//! UTF-8 name, `u32` rank, `u32` extents, `f32` values.

use std::path::Path;

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::flownet::config::ModelConfig;
use crate::flownet::model::FlowModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NFCK";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed {
        what: "checkpoint",
        detail: format!("{what} {v} does not fit in u32"),
    })?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes the model with parameters narrowed to `f32`.
pub fn to_bytes<T: Scalar>(model: &FlowModel<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut buf, cfg.len(), "config length")?;
    buf.extend_from_slice(&cfg);
    put_u32(&mut buf, model.params.len(), "tensor count")?;
    for (name, t) in model.params.iter() {
        put_u32(&mut buf, name.len(), "name length")?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim(), "rank")?;
        for &d in t.shape() {
            put_u32(&mut buf, d, "extent")?;
        }
        for &v in t.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                what: "checkpoint",
                needed: self.pos.saturating_add(n),
                found: self.buf.len(),
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<FlowModel<f32>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    config.validate()?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| malformed(format!("tensor `{name}` extents {shape:?} overflow")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let reference = FlowModel::<f32>::new(config.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        let got = params
            .get(name)
            .map_err(|_| malformed(format!("missing tensor `{name}` for this configuration")))?;
        if got.shape() != t.shape() {
            return Err(malformed(format!(
                "tensor `{name}` has shape {:?}, configuration needs {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.params.len() {
        return Err(malformed("checkpoint holds tensors this configuration does not use"));
    }
    Ok(FlowModel { config, params })
}

pub fn save<T: Scalar>(model: &FlowModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<FlowModel<f32>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
