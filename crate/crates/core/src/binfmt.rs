//! Little-endian helpers shared by the checkpoint and dataset file formats.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("invalid content: {0}")]
    Invalid(String),
}

pub(crate) struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        LeReader { inner }
    }

    pub fn bytes(&mut self, n: usize, what: &'static str) -> Result<Vec<u8>, FormatError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => FormatError::Truncated(what),
            _ => FormatError::Io(e),
        })?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], FormatError> {
        let v = self.bytes(N, what)?;
        Ok(v.try_into().expect("exact length"))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.array::<4>("magic")?;
        if &found != expected {
            return Err(FormatError::Magic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let raw = self.bytes(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn string(&mut self, what: &'static str) -> Result<String, FormatError> {
        let len = self.u16(what)? as usize;
        let raw = self.bytes(len, what)?;
        String::from_utf8(raw).map_err(|e| FormatError::Invalid(format!("{what}: {e}")))
    }

    /// Fails unless the stream is exhausted.
    pub fn finish(mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::Invalid("trailing bytes after last record".into())),
        }
    }
}

pub(crate) struct LeWriter<W> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub fn new(inner: W) -> Self {
        LeWriter { inner }
    }

    pub fn raw(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.raw(&[v])
    }

    pub fn u16(&mut self, v: u16) -> io::Result<()> {
        self.raw(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.raw(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, v: &[f64]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 8);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.raw(&buf)
    }

    pub fn string(&mut self, s: &str) -> Result<(), FormatError> {
        let len = u16::try_from(s.len())
            .map_err(|_| FormatError::Invalid(format!("string of {} bytes is too long", s.len())))?;
        self.u16(len)?;
        self.raw(s.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
