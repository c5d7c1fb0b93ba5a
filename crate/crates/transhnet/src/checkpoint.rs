//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "FUTH" | version u32 | count u32
//! count × { name_len u16 | name | dtype u8 (0 = f32, 1 = f64) | rank u8 | dims u32 × rank | payload }
//! crc32 u32 of every preceding byte
//! ```
//!
//! Saving always writes f64; loading accepts both dtypes.

use std::fs;
use std::path::Path;

use transhnet_core::nn::ParamStore;
use transhnet_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FUTH";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            DTYPE_F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
            other => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype code {other}"))),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

/// Every parameter and buffer of `store`, in registration order.
pub fn store_tensors(store: &ParamStore) -> NamedTensors {
    store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(&store_tensors(store))?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads `path` into a store built from the same configuration.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = load(path)?;
    store
        .load_values(&tensors)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
