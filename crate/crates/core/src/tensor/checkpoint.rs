//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPGN" | u32 version (=1) | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims[ndim] | f32 payload
//! ```
//!
//! Tensors are written in ascending name order so identical contents always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPGN";
pub const VERSION: u32 = 1;

pub type NamedTensors = BTreeMap<String, Tensor<f32>>;

pub fn encode_checkpoint(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let nlen = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::invalid(format!("too many dims in {name}")))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dim too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<NamedTensors> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_owned();
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = c.take(len.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &NamedTensors) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<NamedTensors> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
