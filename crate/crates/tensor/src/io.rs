//! Binary tensor records.
//!
//! A record is the 6-byte magic `MTNSR1`, a little-endian `u32` rank, one
//! little-endian `u32` per extent, then the row-major values as little-endian
//! `f64`. An archive is the magic `MTNSA1`, a `u32` entry count, and per entry
//! a `u32` byte length, that many bytes of UTF-8 name, and one record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const RECORD_MAGIC: &[u8; 6] = b"MTNSR1";
pub const ARCHIVE_MAGIC: &[u8; 6] = b"MTNSA1";

const MAX_RANK: usize = 8;
const MAX_NUMEL: usize = 1 << 31;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(TensorError::Format(format!("bad record magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= MAX_NUMEL)
            .ok_or_else(|| TensorError::Format("tensor too large".into()))?;
        shape.push(d);
    }
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Format("trailing bytes after record".into()));
    }
    Ok(t)
}

pub fn write_archive<'a, W, I>(w: &mut W, entries: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    I::IntoIter: ExactSizeIterator,
{
    let entries = entries.into_iter();
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(TensorError::Format(format!("bad archive magic {magic:?}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(TensorError::Format(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
