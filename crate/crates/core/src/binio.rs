//! Little-endian binary containers with a trailing CRC32 over everything
//! before it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 6]) -> Self {
        Self {
            buf: magic.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Named array: name, rank, dims, then the data.
    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.usize(t.shape().len());
        for &d in t.shape() {
            self.usize(d);
        }
        self.f64s(t.data());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    /// Verifies the trailer and the magic before any field is parsed.
    pub fn open(bytes: &'a [u8], magic: &[u8; 6], kind: &'static str) -> Result<Self> {
        let err = |msg: &str| Error::Format {
            kind,
            msg: msg.into(),
        };
        if bytes.len() < magic.len() + 4 {
            return Err(err("truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(err("CRC32 mismatch (truncated or corrupt file)"));
        }
        if &body[..magic.len()] != magic {
            return Err(err("bad magic"));
        }
        Ok(Self {
            data: body,
            pos: magic.len(),
            kind,
        })
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.error("unexpected end of data"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error("invalid UTF-8 string"))
    }

    /// Reads a named array and checks its name.
    pub fn tensor(&mut self, expected: &str) -> Result<Tensor> {
        let name = self.str()?;
        if name != expected {
            return Err(self.error(format!("expected array {expected:?}, found {name:?}")));
        }
        let rank = self.usize()?;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.error("array size overflow"))?;
        let data = self.f64s(n)?;
        Tensor::new(&shape, data).map_err(|e| self.error(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error("trailing bytes after last field"));
        }
        Ok(())
    }
}
