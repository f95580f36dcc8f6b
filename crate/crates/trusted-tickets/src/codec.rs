//! Canonical binary encoding primitives.
//!
//! Every persistent or on-wire structure in this crate uses the same layout
//! discipline: a leading version byte, then fixed-order fields, each variable
//! length field prefixed by a big-endian `u32` length. Decoders are strict:
//! truncation, an unknown version, or trailing bytes all fail. There is
//! exactly one accepted encoding per value, so `encode(decode(b)) == b` for
//! every accepted `b`.

use thiserror::Error;

/// Version byte shared by all encodings in this crate.
pub const WIRE_VERSION: u8 = 0x01;

/// Decoding failure. All variants are surfaced to callers as a malformed
/// encoding; the variant carries the first offending condition.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("encoding truncated")]
    Truncated,
    #[error("unsupported encoding version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown tag {0:#04x}")]
    BadTag(u8),
    #[error("trailing bytes after value")]
    TrailingBytes,
    #[error("field exceeds length bound")]
    Oversized,
}

/// Cursor over an immutable byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        if self.remaining() < 1 {
            return Err(CodecError::Truncated);
        }
        let b = self.buf[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads `n` raw bytes. Bounds-checked before any allocation, so a
    /// corrupted length prefix cannot trigger an oversized read.
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Reads a `u32` length prefix followed by that many bytes.
    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::BadTag(0))
    }

    /// Consumes the version byte, failing on mismatch.
    pub fn version(&mut self) -> Result<(), CodecError> {
        let v = self.u8()?;
        if v != WIRE_VERSION {
            return Err(CodecError::BadVersion(v));
        }
        Ok(())
    }

    /// Final check for a top-level decoder: no bytes may remain.
    pub fn finish(self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::TrailingBytes);
        }
        Ok(())
    }
}

/// Append-only encoder matching [`Reader`].
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    /// Starts an encoding with the shared version byte.
    pub fn versioned() -> Self {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn raw(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Length-prefixed byte field.
    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.raw(v);
    }

    pub fn string(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_fields() {
        let mut w = Writer::versioned();
        w.u32(7);
        w.bytes(b"abc");
        w.u64(u64::MAX);
        w.string("tag");
        let buf = w.into_vec();

        let mut r = Reader::new(&buf);
        r.version().unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.bytes().unwrap(), b"abc");
        assert_eq!(r.u64().unwrap(), u64::MAX);
        assert_eq!(r.string().unwrap(), "tag");
        r.finish().unwrap();
    }

    #[test]
    fn truncation_detected() {
        let mut w = Writer::versioned();
        w.bytes(b"abcdef");
        let mut buf = w.into_vec();
        buf.truncate(buf.len() - 1);
        let mut r = Reader::new(&buf);
        r.version().unwrap();
        assert_eq!(r.bytes().unwrap_err(), CodecError::Truncated);
    }

    #[test]
    fn corrupt_length_prefix_is_truncation_not_alloc() {
        let mut w = Writer::versioned();
        w.bytes(b"x");
        let mut buf = w.into_vec();
        buf[1] = 0x80; // length prefix now claims ~2 GiB
        let mut r = Reader::new(&buf);
        r.version().unwrap();
        assert_eq!(r.bytes().unwrap_err(), CodecError::Truncated);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut w = Writer::versioned();
        w.u32(1);
        let mut buf = w.into_vec();
        buf.push(0);
        let mut r = Reader::new(&buf);
        r.version().unwrap();
        r.u32().unwrap();
        assert_eq!(r.finish().unwrap_err(), CodecError::TrailingBytes);
    }

    #[test]
    fn bad_version_rejected() {
        let buf = [0x02u8, 0, 0, 0, 0];
        let mut r = Reader::new(&buf);
        assert_eq!(r.version().unwrap_err(), CodecError::BadVersion(0x02));
    }
}
