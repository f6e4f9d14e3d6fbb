//! Little helpers shared by the binary file formats.

use sha2::{Digest, Sha256};

use crate::error::FormatError;

/// First eight bytes of SHA-256, read little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Splits off and verifies the trailing checksum, returning the payload.
pub fn verify_trailer(bytes: &[u8]) -> Result<&[u8], FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            needed: 8,
            offset: 0,
            len: bytes.len(),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
    let computed = checksum64(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(payload)
}

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                needed: n,
                offset: self.pos,
                len: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32_le(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn u32_be(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn u64_le(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    /// `count` little-endian f32 values. The byte length is checked before
    /// anything is allocated.
    pub fn f32_le(&mut self, count: usize) -> Result<Vec<f32>, FormatError> {
        let n = count.checked_mul(4).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            offset: self.pos,
            len: self.bytes.len(),
        })?;
        let raw = self.take(n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<(), FormatError> {
        let found = self.take(expected.len())?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }
}

pub fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
