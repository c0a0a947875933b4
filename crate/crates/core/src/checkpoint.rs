//! Bit-exact little-endian checkpoint container.
//!
//! Layout: `SDN1`, u32 version, u32 tensor count; per tensor a u16 name
//! length, the UTF-8 name, u8 dtype (0 = f32), u8 rank, rank × u32 dims and
//! the raw f32 payload; then a u32-prefixed UTF-8 config blob, u64 seed and
//! u64 step.

use std::collections::BTreeMap;
use std::path::Path;

use sdn_autograd::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDN1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub config: String,
    pub seed: u64,
    pub step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = r.utf8(len, "tensor name")?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32("dims")? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, &name)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let clen = r.u32("config length")? as usize;
        let config = r.utf8(clen, "config")?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, config, seed, step })
    }

    /// Writes via a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}
