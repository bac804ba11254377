//! Self-describing binary container shared by classifier and optimizer
//! checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "RNNADVCK"
//! version    u32       FORMAT_VERSION
//! kind       u8        1 = classifier, 2 = learned optimizer
//! spec       u32 length + UTF-8 JSON
//! count      u32       number of tensors
//! tensor*    u32 ndim, ndim x u64 extents, numel x f64
//! checksum   u64       FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RNNADVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Classifier = 1,
    Optimizer = 2,
}

#[derive(Debug, Clone)]
pub(crate) struct Container {
    pub kind: Kind,
    pub spec: String,
    pub tensors: Vec<Tensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.spec.len() as u32).to_le_bytes());
        out.extend_from_slice(self.spec.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let kind = match r.take(1)?[0] {
            1 => Kind::Classifier,
            2 => Kind::Optimizer,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let spec_len = r.u32()? as usize;
        let spec = String::from_utf8(r.take(spec_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("spec is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("tensor extent overflow".into()))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        let body_end = r.pos;
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        if stored != fnv1a(&bytes[..body_end]) {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        Ok(Self {
            kind,
            spec,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected: Kind) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self::decode(&bytes)?;
        if c.kind != expected {
            return Err(Error::Checkpoint(format!(
                "{}: expected a {expected:?} checkpoint, found {:?}",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
