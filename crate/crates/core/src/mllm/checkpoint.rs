//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "EMMACKPT"
//! version      u32      1
//! heads        u8       bit 0: fusion chain present, bit 1: decoder present
//! config_len   u32
//! config       TOML text of the model config
//! count        u32      number of records
//! record*      u16 name_len, name (UTF-8), u8 dtype tag (0 = f32, 1 = f64),
//!              u8 ndim, u32 dims[ndim], raw values
//! ```
//!
//! Loading rebuilds the model from the echoed config and requires every
//! record to match a parameter of that model by name and shape, and every
//! parameter to be covered exactly once.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mllm::config::EmmaConfig;
use crate::mllm::model::EmmaModel;
use crate::nn::Module;
use crate::tensor::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"EMMACKPT";
pub const VERSION: u32 = 1;

const HAS_MFF: u8 = 1;
const HAS_DECODER: u8 = 2;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes<T: Scalar>(model: &EmmaModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let heads = if model.mff.is_some() { HAS_MFF } else { 0 } | if model.decoder.is_some() { HAS_DECODER } else { 0 };
    out.push(heads);
    let cfg = model.cfg.to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let mut count = 0u32;
    model.visit(&mut |_| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    model.visit(&mut |p| {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    });
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| bad(format!("invalid UTF-8: {e}")))
    }
}

struct Record {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Header fields without the parameter payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub config: EmmaConfig,
    pub has_mff: bool,
    pub has_decoder: bool,
}

fn read_header(cur: &mut Cursor) -> Result<Header> {
    if cur.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let heads = cur.u8()?;
    let len = cur.u32()? as usize;
    let config = EmmaConfig::from_toml(cur.str(len)?)?;
    Ok(Header {
        config,
        has_mff: heads & HAS_MFF != 0,
        has_decoder: heads & HAS_DECODER != 0,
    })
}

pub fn read_header_bytes(bytes: &[u8]) -> Result<Header> {
    read_header(&mut Cursor { buf: bytes, pos: 0 })
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<EmmaModel<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = read_header(&mut cur)?;
    let count = cur.u32()? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let n = cur.u16()? as usize;
        let name = cur.str(n)?.to_owned();
        let dtype = DType::from_tag(cur.u8()?).ok_or_else(|| bad(format!("{name}: unknown dtype tag")))?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * dtype.size())?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        if records.insert(name.clone(), Record { shape, values }).is_some() {
            return Err(bad(format!("duplicate record {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let mut model = EmmaModel::<T>::new(&header.config, 0)?;
    if !header.has_mff {
        model.mff = None;
    }
    if !header.has_decoder {
        model.decoder = None;
    }
    if header.has_mff && model.mff.is_none() {
        return Err(bad("fusion chain stored but config disables it"));
    }
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match records.remove(&p.name) {
            None => err = Some(bad(format!("missing parameter {}", p.name))),
            Some(r) if r.shape != p.value.shape() => {
                err = Some(bad(format!(
                    "{}: stored shape {:?}, config expects {:?}",
                    p.name,
                    r.shape,
                    p.value.shape()
                )))
            }
            Some(r) => p
                .value
                .data_mut()
                .iter_mut()
                .zip(r.values)
                .for_each(|(d, v)| *d = T::from_f64(v)),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = records.keys().next() {
        return Err(bad(format!("unexpected parameter {extra}")));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &EmmaModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<EmmaModel<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
