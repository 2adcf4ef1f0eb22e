//! Binary checkpoint format.
//!
//! ```text
//! "SCAECKPT" | version u32 | config length u32 | config JSON
//! | value width u8 (4 or 8) | parameter count u32
//! | per parameter: name length u32, name, n c h w (u32 each), values
//! ```
//!
//! Integers and values are little-endian. Values are IEEE floats of the
//! stated width.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{SlimCae, SlimCaeConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const MAGIC: &[u8; 8] = b"SCAECKPT";
pub const VERSION: u32 = 1;

/// Float width used for stored values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    F32,
    F64,
}

impl Storage {
    fn bytes(self) -> u8 {
        match self {
            Storage::F32 => 4,
            Storage::F64 => 8,
        }
    }
}

pub fn to_bytes<S: Scalar>(model: &SlimCae<S>, storage: Storage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.push(storage.bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            match storage {
                Storage::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Storage::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::data("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<SlimCae<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let clen = r.u32()? as usize;
    let config: SlimCaeConfig =
        serde_json::from_slice(r.take(clen)?).map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
    let width = r.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(Error::data(format!("unsupported value width {width}")));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::data("parameter name is not UTF-8"))?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape4::from(dims);
        let raw = r.take(shape.len() * width as usize)?;
        let data: Vec<S> = if width == 8 {
            raw.chunks_exact(8)
                .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| S::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()
        };
        params.push((name, Tensor4::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    SlimCae::from_params(config, params)
}

pub fn save<S: Scalar>(model: &SlimCae<S>, path: &Path, storage: Storage) -> Result<()> {
    let bytes = to_bytes(model, storage)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<SlimCae<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Identifier carried by bitstreams: the first 8 bytes of the SHA-256 of the
/// model's 64-bit serialization.
pub fn model_hash<S: Scalar>(model: &SlimCae<S>) -> [u8; 8] {
    let bytes = to_bytes(model, Storage::F64).expect("in-memory serialization");
    let digest = Sha256::digest(&bytes);
    digest[..8].try_into().expect("8 bytes")
}

pub fn hash_hex(hash: &[u8; 8]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
