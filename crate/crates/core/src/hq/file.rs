//! Binary index file.
//!
//! ```text
//! "SRHQ" | version u32 | d u32 | vq_size u32 | subspaces u32 | pq_size u32
//! | n u32 | flags u32 (bit 0: bias, bit 1: vectors) | source sha-256 [32]
//! | C_VQ f32 (vq_size x d) | R f32 (d x d) | C_PQ f32 (subspaces x pq_size x d/subspaces)
//! | vq codes u16 (n) | pq codes u8 (n x subspaces)
//! | [bias f32 (n)] | [vectors f32 (n x d)]
//! ```

use std::path::Path;

use super::{HQCodebooks, HqIndex};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Reader, Writer};

pub const INDEX_MAGIC: &[u8; 4] = b"SRHQ";
pub const INDEX_VERSION: u32 = 1;

const HAS_BIAS: u32 = 1;
const HAS_VECTORS: u32 = 2;

impl HqIndex {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let b = &self.books;
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC).u32(INDEX_VERSION);
        w.len_u32(b.dim())?.len_u32(b.vq_size())?.len_u32(b.num_subspaces())?.len_u32(b.pq_size())?;
        w.len_u32(self.n)?;
        let flags = if self.bias.is_some() { HAS_BIAS } else { 0 } | if self.vectors.is_some() { HAS_VECTORS } else { 0 };
        w.u32(flags).bytes(&self.source_hash);
        w.f32s(&b.vq).f32s(&b.rotation).f32s(&b.pq);
        for &c in &self.vq_codes {
            w.u16(c);
        }
        w.bytes(&self.pq_codes);
        if let Some(bias) = &self.bias {
            w.f32s(bias);
        }
        if let Some(v) = &self.vectors {
            w.f32s(v);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("index file", bytes);
        r.expect_magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::format("index file", format!("unsupported version {version}")));
        }
        let d = r.usize()?;
        let vq_size = r.usize()?;
        let kk = r.usize()?;
        let pq_size = r.usize()?;
        let n = r.usize()?;
        let flags = r.u32()?;
        if flags & !(HAS_BIAS | HAS_VECTORS) != 0 {
            return Err(Error::format("index file", format!("unknown flags {flags:#x}")));
        }
        if d == 0 || kk == 0 || d % kk != 0 || vq_size == 0 || pq_size == 0 || pq_size > 256 || vq_size > 65536 {
            return Err(Error::format("index file", "inconsistent header"));
        }
        let source_hash = r.hash()?;
        let vq = r.f32s(vq_size * d)?;
        let rotation = r.f32s(d * d)?;
        let pq = r.f32s(pq_size * d)?;
        let books = HQCodebooks::from_parts(d, kk, vq, rotation, pq)?;
        let vq_codes = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let pq_codes = r.take(n * kk)?.to_vec();
        let bias = if flags & HAS_BIAS != 0 { Some(r.f32s(n)?) } else { None };
        let vectors = if flags & HAS_VECTORS != 0 { Some(r.f32s(n * d)?) } else { None };
        r.finish()?;
        HqIndex::from_codes(books, n, vq_codes, pq_codes, bias, vectors, source_hash)
    }
}

pub fn save_index(path: &Path, index: &HqIndex) -> Result<()> {
    write_file(path, &index.to_bytes()?)
}

pub fn load_index(path: &Path) -> Result<HqIndex> {
    HqIndex::from_bytes(&read_file(path)?)
}
