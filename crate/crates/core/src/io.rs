//! Little-endian binary helpers and content hashing for artifact files.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type ContentHash = [u8; 32];

pub fn sha256(bytes: &[u8]) -> ContentHash {
    Sha256::digest(bytes).into()
}

pub fn hash_hex(hash: &ContentHash) -> String {
    hex::encode(hash)
}

pub fn parse_hash_hex(s: &str) -> Result<ContentHash> {
    let bytes = hex::decode(s).map_err(|e| Error::format("content hash", e.to_string()))?;
    bytes
        .try_into()
        .map_err(|_| Error::format("content hash", "expected 32 bytes"))
}

pub fn file_hash(path: &Path) -> Result<ContentHash> {
    Ok(sha256(&read_file(path)?))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn len_u32(&mut self, v: usize) -> Result<&mut Self> {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in 32 bits")))?;
        Ok(self.u32(v))
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> Result<&mut Self> {
        self.len_u32(s.len())?;
        Ok(self.bytes(s.as_bytes()))
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Reader { what, buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.what, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.what, "length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn hash(&mut self) -> Result<ContentHash> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.what, "invalid utf-8"))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.what, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_reader_roundtrip() {
        let mut w = Writer::new();
        w.bytes(b"ABCD").u32(7).u16(3).u8(9).f32(-1.5);
        w.str("héllo").unwrap();
        let buf = w.finish();
        let mut r = Reader::new("test", &buf);
        r.expect_magic(b"ABCD").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u16().unwrap(), 3);
        assert_eq!(r.u8().unwrap(), 9);
        assert_eq!(r.f32().unwrap(), -1.5);
        assert_eq!(r.str().unwrap(), "héllo");
        r.finish().unwrap();
    }

    #[test]
    fn reader_detects_truncation() {
        let mut r = Reader::new("test", &[1, 2]);
        assert!(r.u32().is_err());
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h = sha256(b"abc");
        assert_eq!(
            hash_hex(&h),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(parse_hash_hex(&hash_hex(&h)).unwrap(), h);
    }
}
