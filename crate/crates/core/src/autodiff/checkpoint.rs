//! Parameter checkpoint file.
//!
//! Layout (little-endian): magic `TDSC`, version `u32`, count `u32`, then per
//! parameter: name length `u16`, name bytes, rank `u8`, extents `u32 × rank`,
//! data `f64 × product(extents)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binfmt::{FormatError, LeReader, LeWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(w: W, params: &[NamedArray]) -> Result<(), FormatError> {
    let mut w = LeWriter::new(w);
    w.raw(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u32(u32::try_from(params.len()).map_err(|_| FormatError::Invalid("too many parameters".into()))?)?;
    for p in params {
        if p.shape.iter().product::<usize>() != p.data.len() {
            return Err(FormatError::Invalid(format!("{}: shape/data length mismatch", p.name)));
        }
        w.string(&p.name)?;
        let rank = u8::try_from(p.shape.len())
            .map_err(|_| FormatError::Invalid(format!("{}: rank too large", p.name)))?;
        w.u8(rank)?;
        for &d in &p.shape {
            w.u32(u32::try_from(d).map_err(|_| FormatError::Invalid(format!("{}: extent too large", p.name)))?)?;
        }
        w.f64s(&p.data)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<NamedArray>, FormatError> {
    let mut r = LeReader::new(r);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version(version));
    }
    let count = r.u32("parameter count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape.iter().product();
        let data = r.f64s(n, "parameter data")?;
        out.push(NamedArray { name, shape, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &[NamedArray]) -> Result<(), FormatError> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedArray>, FormatError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
