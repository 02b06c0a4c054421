//! Little-endian container helpers shared by the corpus and checkpoint formats.
//!
//! Every container is `magic`, a 4-byte LE header length, a UTF-8 JSON header
//! and a binary payload.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{format_err, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8], header: &impl Serialize) -> Result<Self> {
        let json = serde_json::to_vec(header)?;
        let mut buf = Vec::with_capacity(magic.len() + 4 + json.len());
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        Ok(Self { buf })
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and parses the JSON header.
    pub fn open<H: DeserializeOwned>(bytes: &'a [u8], magic: &[u8]) -> Result<(Self, H)> {
        let mut r = Self { bytes, pos: 0 };
        let found = r.take(magic.len(), "magic")?;
        if let Some(i) = found.iter().zip(magic).position(|(a, b)| a != b) {
            return Err(format_err(
                i as u64,
                format!(
                    "bad magic: expected {:?}",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let len = r.u32("header length")? as usize;
        let start = r.pos;
        let json = r.take(len, "header")?;
        let header = serde_json::from_slice(json)
            .map_err(|e| format_err(start as u64, format!("malformed header: {e}")))?;
        Ok((r, header))
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(format_err(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {remaining} remain"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let n = count
            .checked_mul(4)
            .ok_or_else(|| format_err(self.pos as u64, format!("{what} size overflows")))?;
        let b = self.take(n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let n = count
            .checked_mul(8)
            .ok_or_else(|| format_err(self.pos as u64, format!("{what} size overflows")))?;
        let b = self.take(n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Fails if payload bytes remain past what the header declared.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.pos as u64,
                format!(
                    "payload has {} bytes beyond what the header declares",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(crate::error::io_err(path))
}

/// Writes through a sibling temp file so readers never see a partial file.
pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(crate::error::io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(crate::error::io_err(path))
}
