//! Little-endian byte encoding shared by the tensor, mask and checkpoint formats.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    /// Append the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    /// Check magic and trailing CRC; the returned reader is positioned after the magic.
    pub fn open(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Truncated {
                expected: 4,
                actual: buf.len(),
            });
        }
        if &buf[..4] != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&buf[..4]).into_owned(),
            });
        }
        Ok(Self { buf, pos: 4 })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // Four trailing CRC bytes must remain after any field.
        let need = self.pos + n + 4;
        if need > self.buf.len() {
            return Err(Error::Truncated {
                expected: need,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// Fail with a truncation error unless `n` payload bytes plus the CRC remain.
    pub fn require(&self, n: usize) -> Result<()> {
        let need = self.pos + n + 4;
        if need > self.buf.len() {
            return Err(Error::Truncated {
                expected: need,
                actual: self.buf.len(),
            });
        }
        Ok(())
    }

    /// For fixed-layout files: the remaining bytes must be exactly
    /// `payload` plus the CRC, and the CRC must match.
    pub fn check_exact(&self, payload: usize) -> Result<()> {
        self.require(payload)?;
        let end = self.pos + payload;
        if end + 4 != self.buf.len() {
            return Err(Error::Format {
                offset: end + 4,
                msg: format!("{} trailing bytes after CRC", self.buf.len() - end - 4),
            });
        }
        check_crc(self.buf, end)
    }

    /// For variable-layout files: verify the trailing CRC before parsing.
    pub fn check_trailing_crc(&self) -> Result<()> {
        if self.buf.len() < self.pos + 4 {
            return Err(Error::Truncated {
                expected: self.pos + 4,
                actual: self.buf.len(),
            });
        }
        check_crc(self.buf, self.buf.len() - 4)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.format("payload size overflows"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn format(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    pub fn at_crc(&self) -> bool {
        self.pos + 4 == self.buf.len()
    }

    /// Verify that only the CRC remains and that it matches.
    pub fn finish(self) -> Result<()> {
        if !self.at_crc() {
            return Err(self.format("trailing bytes after payload"));
        }
        check_crc(self.buf, self.pos)
    }
}

fn check_crc(buf: &[u8], end: usize) -> Result<()> {
    let stored = u32::from_le_bytes(buf[end..end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&buf[..end]);
    if stored != computed {
        return Err(Error::Crc {
            offset: end,
            stored,
            computed,
        });
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
