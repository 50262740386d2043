//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "FSLC"  u32 version=1
//! u32 len, arch id (UTF-8)
//! u32 n, n x u32 block widths
//! u32 height, u32 width, u32 channels
//! f64 tau, u64 seed
//! u32 implant first layer, u32 implant channels (0 = not widened)
//! u32 record count, then per record:
//!   u32 len, name (UTF-8), u32 rank, rank x u32 dims, f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSLC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub arch: String,
    pub widths: Vec<usize>,
    pub input: [usize; 3],
    pub tau: f64,
    pub seed: u64,
    pub implant_first_layer: usize,
    pub implant_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.value)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.meta.arch);
        put_u32(&mut out, self.meta.widths.len() as u32);
        for &w in &self.meta.widths {
            put_u32(&mut out, w as u32);
        }
        for &d in &self.meta.input {
            put_u32(&mut out, d as u32);
        }
        out.extend_from_slice(&self.meta.tau.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        put_u32(&mut out, self.meta.implant_first_layer as u32);
        put_u32(&mut out, self.meta.implant_channels as u32);
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            put_str(&mut out, &r.name);
            put_u32(&mut out, r.value.rank() as u32);
            for &d in r.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in r.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint. `known_archs` lists accepted architecture ids.
    pub fn from_bytes(bytes: &[u8], known_archs: &[&str]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"FSLC\"")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let arch_at = r.pos;
        let arch = r.string()?;
        if !known_archs.contains(&arch.as_str()) {
            return Err(Error::format(arch_at, format!("unknown architecture id {arch:?}")));
        }
        let n = r.u32()? as usize;
        let widths = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let tau = r.f64()?;
        let seed = r.u64()?;
        let implant_first_layer = r.u32()? as usize;
        let implant_channels = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::format(at, "record too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            records.push(Record { name, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last record"));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                arch,
                widths,
                input,
                tau,
                seed,
                implant_first_layer,
                implant_channels,
            },
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, known_archs: &[&str]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, known_archs)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated: need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8 name"))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
