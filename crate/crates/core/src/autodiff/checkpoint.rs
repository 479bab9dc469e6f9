//! Binary checkpoint of parameter groups.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BASEDCKPT1"
//! u32 group count
//! per group:
//!   u32 name length, name bytes (UTF-8)
//!   u32 tensor count
//!   per tensor: u32 rank, u64 extents[rank]
//!   per tensor: f64 values, f64 first moments, f64 second moments
//!   u8 frozen flag
//!   u64 global step
//! u32 metadata length, metadata bytes (UTF-8)
//! ```

use std::fs;
use std::path::Path;

use super::optim::ParamGroup;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 10] = b"BASEDCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub groups: Vec<ParamGroup>,
    pub step: u64,
    /// Free-form text stored after the groups (run configuration).
    pub metadata: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.extend_from_slice(&(g.tensors.len() as u32).to_le_bytes());
            for t in &g.tensors {
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
            for (i, t) in g.tensors.iter().enumerate() {
                for buf in [t.data(), &g.first_moment[i], &g.second_moment[i]] {
                    for v in buf {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            out.push(u8::from(g.frozen));
            out.extend_from_slice(&self.step.to_le_bytes());
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("bad magic".into());
        }
        let n_groups = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        let mut step = 0;
        for _ in 0..n_groups {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| "group name is not UTF-8".to_string())?;
            let n_tensors = r.u32()? as usize;
            let mut shapes = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                shapes.push(shape);
            }
            let mut group = ParamGroup::new(name, Vec::new());
            for shape in shapes {
                let numel: usize = shape.iter().product();
                let data = r.f64s(numel)?;
                group.first_moment.push(r.f64s(numel)?);
                group.second_moment.push(r.f64s(numel)?);
                group
                    .tensors
                    .push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
            }
            group.frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(format!("bad frozen flag {b}")),
            };
            step = r.u64()?;
            groups.push(group);
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| "metadata is not UTF-8".to_string())?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            groups,
            step,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
