//! Little-endian framing shared by the binary artifact formats.
//!
//! Every file is `magic (4 bytes) | body | crc32(magic + body)`. The writer
//! buffers the whole file so the checksum can be appended in one pass.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self {
            buf: magic.to_vec(),
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct BinReader<'a> {
    path: &'a Path,
    body: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    /// Checks magic and trailing CRC, returning a reader positioned after the magic.
    pub fn open(path: &'a Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format {
                path: path.into(),
                message: "file too short".into(),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::Format {
                path: path.into(),
                message: format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(&bytes[..4])
                ),
            });
        }
        let (payload, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Checksum { path: path.into() });
        }
        Ok(Self {
            path,
            body: payload,
            pos: 4,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(self.format_err("unexpected end of data"));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(self.format_err("trailing bytes before checksum"));
        }
        Ok(())
    }

    pub fn format_err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
