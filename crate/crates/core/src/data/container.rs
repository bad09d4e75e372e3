//! The "ATWB" tensor container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "ATWB"
//! version u16      currently 1
//! count   u32      number of entries
//! entry   repeated:
//!   name_len u16, name bytes (UTF-8, unique)
//!   dtype    u8   0 = f32, 1 = f64, 2 = u8
//!   rank     u8
//!   extents  rank x u64
//!   payload  row-major, product(extents) elements
//! ```
//!
//! The empty container is exactly the 10-byte header.

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"ATWB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
            EntryData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn from_tensor<E: Element>(name: impl Into<String>, tensor: &Tensor<E>) -> Entry {
        let data = match E::DTYPE {
            DType::F32 => EntryData::F32(tensor.data().iter().map(|v| v.to_f64() as f32).collect()),
            _ => EntryData::F64(tensor.data().iter().map(|v| v.to_f64()).collect()),
        };
        Entry {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data,
        }
    }

    /// Strict dtype match; shapes are validated by the tensor constructor.
    pub fn to_tensor<E: Element>(&self) -> Result<Tensor<E>> {
        match (&self.data, E::DTYPE) {
            (EntryData::F32(v), DType::F32) => Tensor::from_vec(
                &self.shape,
                v.iter().map(|&x| E::from_f64(x as f64)).collect(),
            ),
            (EntryData::F64(v), DType::F64) => {
                Tensor::from_vec(&self.shape, v.iter().map(|&x| E::from_f64(x)).collect())
            }
            _ => Err(Error::invalid(
                "container",
                format!(
                    "entry {:?} holds {:?}, requested {:?}",
                    self.name,
                    self.data.dtype(),
                    E::DTYPE
                ),
            )),
        }
    }
}

fn check_unique(entries: &[Entry]) -> Result<()> {
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|p| p.name == e.name) {
            return Err(Error::DuplicateName {
                name: e.name.clone(),
            });
        }
    }
    Ok(())
}

pub fn container_to_bytes(entries: &[Entry]) -> Result<Vec<u8>> {
    check_unique(entries)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let expected: usize = e.shape.iter().product();
        if expected != e.data.len() {
            return Err(Error::ShapeMismatch {
                op: "container",
                axis: "elements",
                expected,
                got: e.data.len(),
            });
        }
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("container", "entry name too long"));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.data.dtype().tag());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            EntryData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            EntryData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            EntryData::U8(v) => out.extend_from_slice(v),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedHeader { offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn container_from_bytes(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { version });
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::invalid("container", "entry name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_tag(cur.u8()?)?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = cur.u64()?;
            elements = elements
                .checked_mul(d)
                .ok_or_else(|| Error::OversizedEntry {
                    entry: name.clone(),
                })?;
            shape.push(d as usize);
        }
        let payload = (elements as usize)
            .checked_mul(dtype.byte_width())
            .ok_or_else(|| Error::OversizedEntry {
                entry: name.clone(),
            })?;
        if payload > cur.remaining() {
            return Err(Error::TruncatedPayload {
                entry: name,
                need: payload,
                have: cur.remaining(),
            });
        }
        let raw = cur.take(payload)?;
        let data = match dtype {
            DType::F32 => EntryData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => EntryData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => EntryData::U8(raw.to_vec()),
        };
        entries.push(Entry { name, shape, data });
    }
    check_unique(&entries)?;
    Ok(entries)
}

pub fn save_container(entries: &[Entry], path: impl AsRef<Path>) -> Result<()> {
    let bytes = container_to_bytes(entries)?;
    fs::write(&path, bytes).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let bytes = fs::read(&path).map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    container_from_bytes(&bytes)
}

/// Convenience lookup by name.
pub fn find_entry<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::invalid("container", format!("missing entry {name:?}")))
}
