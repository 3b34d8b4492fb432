//! The MCT1 raw tensor file format, used by every module for import/export.
//!
//! Layout: 4-byte magic `MCT1`, u8 rank, rank x u32 little-endian dims,
//! then f32 little-endian row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MctError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCT1";

/// Guard against absurd dims in corrupt files.
const MAX_ELEMS: u64 = 1 << 30;

pub fn write_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(MctError::format(format!("rank {} exceeds u8", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(MctError::format(format!("dim {d} exceeds u32")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| MctError::format("truncated MCT1 header".to_string()))?;
    if &magic != MAGIC {
        return Err(MctError::format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|_| MctError::format("truncated MCT1 rank".to_string()))?;
    let rank = rank[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut elems: u64 = 1;
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)
            .map_err(|_| MctError::format("truncated MCT1 dims".to_string()))?;
        let d = u32::from_le_bytes(d) as u64;
        elems = elems.saturating_mul(d.max(1)).min(u64::MAX);
        if d == 0 {
            return Err(MctError::format("zero dim in MCT1 header".to_string()));
        }
        shape.push(d as usize);
    }
    if elems > MAX_ELEMS {
        return Err(MctError::format(format!(
            "MCT1 dims {:?} imply an implausible element count",
            shape
        )));
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| MctError::format("truncated MCT1 payload".to_string()))?;
    // strict: nothing may follow the payload
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(MctError::format("trailing bytes after MCT1 payload".to_string())),
        Err(e) => return Err(e.into()),
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path.as_ref()).map_err(|e| {
        MctError::format(format!("cannot open {}: {e}", path.as_ref().display()))
    })?);
    read_from(&mut r)
}
