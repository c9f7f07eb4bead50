//! Sectioned binary container shared by the store and tile-set formats.
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic |
//! | 4 | u32 version |
//! | 4 | u32 section count `n` |
//! | 4 | reserved (0) |
//! | 24·n | section table: u32 kind, u32 reserved, u64 offset, u64 length |
//! | … | each section's payload followed by its u32 CRC32 |
//!
//! All integers are little-endian; the file ends right after the last CRC.

use crate::error::{Error, Result};

const HEADER: usize = 16;
const ENTRY: usize = 24;

pub struct ContainerWriter {
    magic: [u8; 4],
    version: u32,
    sections: Vec<(u32, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new(magic: [u8; 4], version: u32) -> Self {
        Self {
            magic,
            version,
            sections: Vec::new(),
        }
    }

    pub fn section(&mut self, kind: u32, payload: Vec<u8>) -> &mut Self {
        self.sections.push((kind, payload));
        self
    }

    pub fn finish(&self) -> Vec<u8> {
        let n = self.sections.len();
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        let mut offset = (HEADER + ENTRY * n) as u64;
        for (kind, payload) in &self.sections {
            out.extend_from_slice(&kind.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64 + 4;
        }
        for (_, payload) in &self.sections {
            out.extend_from_slice(payload);
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionEntry {
    pub kind: u32,
    pub offset: u64,
    pub length: u64,
}

/// A parsed, checksum-verified container borrowing the file bytes.
pub struct Container<'a> {
    pub version: u32,
    pub entries: Vec<SectionEntry>,
    bytes: &'a [u8],
}

impl<'a> Container<'a> {
    pub fn parse(bytes: &'a [u8], magic: &'static str, max_version: u32) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Truncated("header".into()));
        }
        if &bytes[..4] != magic.as_bytes() {
            return Err(Error::BadMagic { expected: magic });
        }
        let mut r = ByteReader::new(&bytes[4..HEADER]);
        let version = r.u32()?;
        if version == 0 || version > max_version {
            return Err(Error::Version(version));
        }
        let n = r.u32()? as usize;
        let table_end = HEADER
            .checked_add(n.checked_mul(ENTRY).ok_or_else(|| Error::Malformed("section count".into()))?)
            .ok_or_else(|| Error::Malformed("section count".into()))?;
        if bytes.len() < table_end {
            return Err(Error::Truncated("section table".into()));
        }
        let mut r = ByteReader::new(&bytes[HEADER..table_end]);
        let mut entries = Vec::with_capacity(n);
        let mut expected = table_end as u64;
        for _ in 0..n {
            let kind = r.u32()?;
            r.u32()?;
            let offset = r.u64()?;
            let length = r.u64()?;
            if offset != expected {
                return Err(Error::Malformed(format!("section {kind} at offset {offset}, expected {expected}")));
            }
            expected = offset
                .checked_add(length)
                .and_then(|v| v.checked_add(4))
                .ok_or_else(|| Error::Malformed("section length".into()))?;
            entries.push(SectionEntry { kind, offset, length });
        }
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated(format!("{} of {expected} bytes", bytes.len())));
        }
        if bytes.len() as u64 != expected {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                bytes.len() as u64 - expected
            )));
        }
        for e in &entries {
            let (o, l) = (e.offset as usize, e.length as usize);
            let stored = u32::from_le_bytes(bytes[o + l..o + l + 4].try_into().unwrap());
            if crc32fast::hash(&bytes[o..o + l]) != stored {
                return Err(Error::Checksum { section: e.kind });
            }
        }
        Ok(Self {
            version,
            entries,
            bytes,
        })
    }

    pub fn section(&self, kind: u32) -> Result<&'a [u8]> {
        let e = self
            .entries
            .iter()
            .find(|e| e.kind == kind)
            .ok_or_else(|| Error::Malformed(format!("missing section {kind}")))?;
        Ok(&self.bytes[e.offset as usize..(e.offset + e.length) as usize])
    }

    /// Size implied by the header and section table.
    pub fn declared_size(&self) -> u64 {
        let table = (HEADER + ENTRY * self.entries.len()) as u64;
        table + self.entries.iter().map(|e| e.length + 4).sum::<u64>()
    }
}

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Truncated(format!("need {n} bytes at {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("count".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = ContainerWriter::new(*b"TEST", 1);
        w.section(1, vec![1, 2, 3]).section(7, b"hello".to_vec());
        w.finish()
    }

    #[test]
    fn round_trip_and_size() {
        let bytes = sample();
        let c = Container::parse(&bytes, "TEST", 1).unwrap();
        assert_eq!(c.section(1).unwrap(), &[1, 2, 3]);
        assert_eq!(c.section(7).unwrap(), b"hello");
        assert_eq!(c.declared_size(), bytes.len() as u64);
        assert!(c.section(2).is_err());
    }

    #[test]
    fn detects_damage() {
        let bytes = sample();
        assert!(matches!(Container::parse(&bytes, "NOPE", 1), Err(Error::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(Container::parse(&v2, "TEST", 1), Err(Error::Version(9))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x40;
        assert!(matches!(Container::parse(&bad, "TEST", 1), Err(Error::Checksum { section: 7 })));
        assert!(matches!(
            Container::parse(&bytes[..bytes.len() - 2], "TEST", 1),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn reader_reports_truncation() {
        let mut r = ByteReader::new(&[1, 0, 0]);
        assert!(matches!(r.u32(), Err(Error::Truncated(_))));
    }
}
