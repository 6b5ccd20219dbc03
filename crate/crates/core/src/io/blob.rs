//! Little-endian tensor container.
//!
//! Layout: magic `RAPQ`, `u32` version, `u32` entry count, then one table
//! record per entry (`u32` name length, UTF-8 name, `u8` dtype, `u8` rank,
//! `u64` extents, `u64` absolute byte offset), then the payloads.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RAPQ";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I32: u8 = 1;
const DTYPE_U8: u8 = 2;
const DTYPE_I8: u8 = 3;
const DTYPE_PACKED_BASE: u8 = 16;

/// Payload of one named array.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
    I8(Vec<i8>),
    /// Unsigned values of 1, 2 or 4 bits, packed low bits first.
    Packed { bits: u8, values: Vec<u8> },
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => DTYPE_F32,
            ArrayData::I32(_) => DTYPE_I32,
            ArrayData::U8(_) => DTYPE_U8,
            ArrayData::I8(_) => DTYPE_I8,
            ArrayData::Packed { bits, .. } => DTYPE_PACKED_BASE + bits,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::I8(v) => v.len(),
            ArrayData::Packed { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integer view of any non-float payload.
    pub fn to_i64(&self) -> Option<Vec<i64>> {
        Some(match self {
            ArrayData::F32(_) => return None,
            ArrayData::I32(v) => v.iter().map(|&x| x as i64).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| x as i64).collect(),
            ArrayData::I8(v) => v.iter().map(|&x| x as i64).collect(),
            ArrayData::Packed { values, .. } => values.iter().map(|&x| x as i64).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(t: &Tensor) -> Self {
        NamedArray {
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        match &self.data {
            ArrayData::F32(v) => Tensor::new(self.shape.clone(), v.clone()),
            other => Err(Error::DType {
                name: name.to_string(),
                code: other.dtype(),
            }),
        }
    }
}

pub type BlobMap = BTreeMap<String, NamedArray>;

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs unsigned `bits`-wide values, first value in the lowest bits.
pub fn pack_bits(values: &[u8], bits: u8) -> Vec<u8> {
    let per = 8 / bits as usize;
    let mut out = vec![0u8; packed_len(values.len(), bits)];
    for (i, &v) in values.iter().enumerate() {
        out[i / per] |= v << ((i % per) * bits as usize);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Vec<u8> {
    let per = 8 / bits as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    (0..count)
        .map(|i| (bytes[i / per] >> ((i % per) * bits as usize)) & mask)
        .collect()
}

fn payload_bytes(data: &ArrayData) -> Vec<u8> {
    match data {
        ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ArrayData::U8(v) => v.clone(),
        ArrayData::I8(v) => v.iter().map(|&x| x as u8).collect(),
        ArrayData::Packed { bits, values } => pack_bits(values, *bits),
    }
}

fn validate_entry(name: &str, a: &NamedArray) -> Result<()> {
    let count: usize = a.shape.iter().product();
    if count != a.data.len() {
        return Err(Error::Extent {
            name: name.to_string(),
            detail: format!("shape {:?} holds {count} values, payload has {}", a.shape, a.data.len()),
        });
    }
    if a.shape.len() > u8::MAX as usize {
        return Err(Error::Extent {
            name: name.to_string(),
            detail: "rank exceeds 255".into(),
        });
    }
    if let ArrayData::Packed { bits, values } = &a.data {
        if ![1, 2, 4].contains(bits) {
            return Err(Error::DType {
                name: name.to_string(),
                code: DTYPE_PACKED_BASE + bits,
            });
        }
        let hi = (1i64 << bits) - 1;
        if let Some(&v) = values.iter().find(|&&v| v as i64 > hi) {
            return Err(Error::PayloadRange {
                name: name.to_string(),
                value: v as i64,
                lo: 0,
                hi,
            });
        }
    }
    Ok(())
}

pub fn encode(map: &BlobMap) -> Result<Vec<u8>> {
    let mut header_len = 12usize;
    for (name, a) in map {
        validate_entry(name, a)?;
        header_len += 4 + name.len() + 2 + 8 * a.shape.len() + 8;
    }
    let mut out = Vec::with_capacity(header_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    let payloads: Vec<Vec<u8>> = map.values().map(|a| payload_bytes(&a.data)).collect();
    let mut offset = header_len as u64;
    for ((name, a), bytes) in map.iter().zip(&payloads) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(a.data.dtype());
        out.push(a.shape.len() as u8);
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += bytes.len() as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    for bytes in payloads {
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Extent {
                name: what.to_string(),
                detail: format!("header truncated at byte {}", self.pos),
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(buf: &[u8]) -> Result<BlobMap> {
    if buf.len() < 4 || buf[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = buf.len().min(4);
        found[..n].copy_from_slice(&buf[..n]);
        return Err(Error::Magic { found });
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Version { found: version });
    }
    let count = r.u32("header")?;
    let mut map = BlobMap::new();
    for _ in 0..count {
        let len = r.u32("table")? as usize;
        let name = String::from_utf8(r.take(len, "table")?.to_vec())
            .map_err(|_| Error::Graph("tensor name is not valid UTF-8".into()))?;
        let dtype = r.u8(&name)?;
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64(&name)?).map_err(|_| Error::Extent {
                name: name.clone(),
                detail: "extent does not fit in memory".into(),
            })?);
        }
        let offset = r.u64(&name)?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Extent {
                name: name.clone(),
                detail: "element count overflows".into(),
            })?;
        let nbytes = match dtype {
            DTYPE_F32 | DTYPE_I32 => count.checked_mul(4),
            DTYPE_U8 | DTYPE_I8 => Some(count),
            d if d > DTYPE_PACKED_BASE && [1, 2, 4].contains(&(d - DTYPE_PACKED_BASE)) => {
                Some(packed_len(count, d - DTYPE_PACKED_BASE))
            }
            code => return Err(Error::DType { name, code }),
        };
        let range = nbytes.and_then(|n| {
            let start = usize::try_from(offset).ok()?;
            let end = start.checked_add(n)?;
            (end <= buf.len()).then_some(start..end)
        });
        let Some(range) = range else {
            return Err(Error::Extent {
                name,
                detail: format!("payload at offset {offset} runs past end of file ({} bytes)", buf.len()),
            });
        };
        let bytes = &buf[range];
        let data = match dtype {
            DTYPE_F32 => {
                let v: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "decode" });
                }
                ArrayData::F32(v)
            }
            DTYPE_I32 => ArrayData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_U8 => ArrayData::U8(bytes.to_vec()),
            DTYPE_I8 => ArrayData::I8(bytes.iter().map(|&b| b as i8).collect()),
            d => {
                let bits = d - DTYPE_PACKED_BASE;
                ArrayData::Packed {
                    bits,
                    values: unpack_bits(bytes, bits, count),
                }
            }
        };
        map.insert(name, NamedArray { shape, data });
    }
    Ok(map)
}

pub fn write_blob(path: &Path, map: &BlobMap) -> Result<()> {
    std::fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<BlobMap> {
    decode(&std::fs::read(path)?)
}
