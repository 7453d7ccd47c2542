//! Little-endian primitives shared by the dataset and parameter file formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value exceeds u32 range");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

pub(crate) struct Reader<'a> {
    what: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(what: &'static str, data: &'a [u8]) -> Self {
        Self { what, data, pos: 0 }
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let out = &self.data[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(format!(
                "truncated: needed {len} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            ))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| self.error("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let found = self.take(magic.len())?;
        if found != magic {
            return Err(self.error("bad magic bytes".into()));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }

    pub fn error(&self, reason: String) -> Error {
        Error::Format {
            what: self.what,
            reason,
        }
    }
}
