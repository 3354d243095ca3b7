//! Length-prefixed big-endian encoding shared by every canonical form.
//!
//! Variable-length fields carry a `u32` length prefix; fixed-size fields are
//! written raw. The reader is strict: unknown tags, short input and trailing
//! bytes are all errors, so `encode(decode(b)) == b` whenever decoding succeeds.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input reading {0}")]
    Truncated(&'static str),
    #[error("{0} bytes of trailing data")]
    Trailing(usize),
    #[error("invalid tag {tag} for {field}")]
    BadTag { field: &'static str, tag: u8 },
    #[error("{field} exceeds {max} bytes")]
    TooLong { field: &'static str, max: usize },
    #[error("{0} is not valid UTF-8")]
    Utf8(&'static str),
    #[error("invalid {0}")]
    Invalid(&'static str),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn fixed(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(bytes.len() as u32);
        self.fixed(bytes)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn fixed(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CodecError> {
        Ok(self.fixed(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, CodecError> {
        Ok(self.fixed(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array(what)?))
    }

    pub fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], CodecError> {
        let n = self.u32(what)? as usize;
        self.fixed(n, what)
    }

    pub fn str(&mut self, what: &'static str, max: usize) -> Result<&'a str, CodecError> {
        let raw = self.bytes(what)?;
        if raw.len() > max {
            return Err(CodecError::TooLong { field: what, max });
        }
        std::str::from_utf8(raw).map_err(|_| CodecError::Utf8(what))
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Trailing(self.buf.len()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_is_strict() {
        let bytes = Writer::new().u8(1).str("load").u64(9).finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u8("tag").unwrap(), 1);
        assert_eq!(r.str("class", 64).unwrap(), "load");
        assert_eq!(r.u64("tick").unwrap(), 9);
        r.finish().unwrap();

        let mut r = Reader::new(&bytes[..bytes.len() - 1]);
        r.u8("tag").unwrap();
        r.str("class", 64).unwrap();
        assert_eq!(r.u64("tick").unwrap_err(), CodecError::Truncated("tick"));

        let mut extra = bytes.clone();
        extra.push(0);
        let mut r = Reader::new(&extra);
        r.u8("tag").unwrap();
        r.str("class", 64).unwrap();
        r.u64("tick").unwrap();
        assert_eq!(r.finish().unwrap_err(), CodecError::Trailing(1));
    }
}
