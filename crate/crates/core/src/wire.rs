//! Little-endian byte cursor shared by the TPQA/TPQT/TPQS/TPQC container
//! formats. Every read is bounds-checked and truncation turns into a
//! `Format` error naming the field, so malformed files never panic.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or_else(|| overflow(field))?;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated input: needed {len} byte(s) for {field} at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| overflow(field))?, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        self.take(len, field)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Rejects trailing garbage after the last expected field.
    pub fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{what}: {} trailing byte(s) after end of data",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn overflow(field: &str) -> Error {
    Error::Format(format!("length overflow while reading {field}"))
}

pub(crate) struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    pub fn with_capacity(cap: usize) -> Self {
        Writer { bytes: Vec::with_capacity(cap) }
    }

    pub fn magic(&mut self, magic: &[u8; 4]) {
        self.bytes.extend_from_slice(magic);
    }

    pub fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        self.bytes.reserve(vs.len() * 4);
        for v in vs {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.bytes.extend_from_slice(bytes);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// 64-bit FNV-1a over a byte slice; used as the codec-table digest.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// `usize` -> `u32` with a format error instead of silent truncation.
pub(crate) fn u32_of(value: usize, field: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::Format(format!("{field} = {value} does not fit in u32")))
}
