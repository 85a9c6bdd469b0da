//! Binary parameter snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset            | size              | content                         |
//! |-------------------|-------------------|---------------------------------|
//! | 0                 | 8                 | magic `METATL01`                |
//! | 8                 | 8                 | `dim` as u64                    |
//! | 16                | 8                 | `n_items` as u64                |
//! | 24                | 8 * n_items * dim | embeddings, row-major, f64      |
//! | ...               | 8 * dim * 2dim    | transform, row-major, f64       |
//! | ...               | 8 * dim           | bias, f64                       |
//!
//! Nothing follows the bias; trailing bytes are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ParamView, Params};

pub const MAGIC: &[u8; 8] = b"METATL01";

pub fn write_snapshot<W: Write>(params: &Params, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(params.dim() as u64).to_le_bytes())?;
    out.write_all(&(params.n_items() as u64).to_le_bytes())?;
    for v in params
        .embeddings()
        .iter()
        .chain(params.transform())
        .chain(params.bias())
    {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Snapshot(format!("truncated while reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(input: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let len = n
        .checked_mul(8)
        .ok_or_else(|| Error::Snapshot(format!("{what} size overflows")))?;
    // read through `take` so a corrupt header cannot force a huge allocation
    let mut bytes = Vec::new();
    input
        .take(len as u64)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Snapshot(format!("reading {what}: {e}")))?;
    if bytes.len() != len {
        return Err(Error::Snapshot(format!("truncated while reading {what}")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<Params> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Snapshot("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Snapshot(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let dim = read_u64(&mut input, "dim")? as usize;
    let n_items = read_u64(&mut input, "item count")? as usize;
    if dim == 0 {
        return Err(Error::Snapshot("dim is zero".into()));
    }
    let n_emb = n_items
        .checked_mul(dim)
        .ok_or_else(|| Error::Snapshot("embedding table size overflows".into()))?;
    let embeddings = read_f64s(&mut input, n_emb, "embeddings")?;
    let n_transform = dim
        .checked_mul(2 * dim)
        .ok_or_else(|| Error::Snapshot("transform size overflows".into()))?;
    let transform = read_f64s(&mut input, n_transform, "transform")?;
    let bias = read_f64s(&mut input, dim, "bias")?;
    let mut rest = [0u8; 1];
    if input
        .read(&mut rest)
        .map_err(|e| Error::Snapshot(e.to_string()))?
        != 0
    {
        return Err(Error::Snapshot("trailing bytes after bias".into()));
    }
    Params::from_parts(dim, n_items, embeddings, transform, bias)
        .map_err(|e| Error::Snapshot(e.to_string()))
}

pub fn save(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(params, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Params> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(BufReader::new(file))
}
