//! The `TNSR` tensor container.
//!
//! Little-endian layout: magic `TNSR`, `u8` version (1), `u32` entry count;
//! then per entry a `u16` name length, the UTF-8 name, a `u8` dtype code
//! (1 = f32, 2 = f64), a `u16` rank, one `u32` per dimension and the
//! row-major payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TnsrTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TnsrTensor {
    pub fn dtype(&self) -> DType {
        match self {
            TnsrTensor::F32(_) => DType::F32,
            TnsrTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TnsrTensor::F32(t) => t.shape(),
            TnsrTensor::F64(t) => t.shape(),
        }
    }
}

impl From<Tensor<f32>> for TnsrTensor {
    fn from(t: Tensor<f32>) -> Self {
        TnsrTensor::F32(t)
    }
}

impl From<Tensor<f64>> for TnsrTensor {
    fn from(t: Tensor<f64>) -> Self {
        TnsrTensor::F64(t)
    }
}

/// Named tensors in file order.
pub type TnsrMap = IndexMap<String, TnsrTensor>;

/// Removes `name` from `map` as an `f32` tensor.
pub fn take_f32(map: &mut TnsrMap, name: &str) -> Result<Tensor<f32>> {
    match map.shift_remove(name) {
        Some(TnsrTensor::F32(t)) => Ok(t),
        Some(TnsrTensor::F64(_)) => Err(Error::format(0, format!("tensor `{name}` is f64, expected f32"))),
        None => Err(Error::format(0, format!("missing tensor `{name}`"))),
    }
}

fn put_payload<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_tnsr(map: &TnsrMap) -> Result<Vec<u8>> {
    encode_tnsr_indexed(map).map(|(bytes, _)| bytes)
}

/// Also returns each entry's byte offset within the file.
pub fn encode_tnsr_indexed(map: &TnsrMap) -> Result<(Vec<u8>, Vec<u64>)> {
    let mut offsets = Vec::with_capacity(map.len());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(map.len()).map_err(|_| Error::precondition("too many tensors for one file"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in map {
        offsets.push(out.len() as u64);
        let len = u16::try_from(name.len())
            .map_err(|_| Error::precondition(format!("tensor name `{name}` longer than 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype() as u8);
        let ndim = u16::try_from(t.shape().len()).map_err(|_| Error::precondition("rank above 65535"))?;
        out.extend_from_slice(&ndim.to_le_bytes());
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::precondition(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            TnsrTensor::F32(t) => put_payload(t, &mut out),
            TnsrTensor::F64(t) => put_payload(t, &mut out),
        }
    }
    Ok((out, offsets))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: needed {n} bytes for {what}, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn payload<T: Float>(&mut self, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let width = T::DTYPE.size();
        let bytes = self.take(n * width, &format!("payload of `{name}`"))?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Ok(Tensor::from_parts(shape, data))
    }
}

pub fn decode_tnsr(bytes: &[u8]) -> Result<TnsrMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a TNSR file"));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut map = TnsrMap::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let code_at = r.pos as u64;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::format(code_at, format!("unknown dtype code {code}")))?;
        let ndim = r.u16("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let t = match dtype {
            DType::F32 => TnsrTensor::F32(r.payload(shape, &name)?),
            DType::F64 => TnsrTensor::F64(r.payload(shape, &name)?),
        };
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last entry"));
    }
    Ok(map)
}

pub fn write_tnsr(path: impl AsRef<Path>, map: &TnsrMap) -> Result<()> {
    fs::write(path, encode_tnsr(map)?)?;
    Ok(())
}

pub fn read_tnsr(path: impl AsRef<Path>) -> Result<TnsrMap> {
    decode_tnsr(&fs::read(path)?)
}
