//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ILSA-CKPT"  u32 version
//! u32 metadata length, metadata bytes (JSON)
//! u32 record count
//! per record: u32 name length, name (UTF-8), u8 partition tag,
//!             u32 ndim, ndim × u64 dims, prod(dims) × f64
//! ```

use std::io::{Read, Write};

use super::params::{ParamSet, Partition};
use super::tensor::Tensor;
use crate::error::{IlsaError, Result};

pub const MAGIC: &[u8; 9] = b"ILSA-CKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet, metadata: &serde_json::Value) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(metadata)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for e in params.entries() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.partition.tag()])?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(e.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(e.value.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(e.value.len() * 8);
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn fmt_err(msg: impl Into<String>) -> IlsaError {
    IlsaError::Format(msg.into())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamSet, serde_json::Value)> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(|_| fmt_err("checkpoint too short"))?;
    if &magic != MAGIC {
        return Err(fmt_err("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata: serde_json::Value = serde_json::from_slice(&meta)?;
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        if n > 4096 {
            return Err(fmt_err("parameter name too long"));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("parameter name is not UTF-8"))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let partition = Partition::from_tag(tag[0]).ok_or_else(|| fmt_err(format!("bad partition tag {}", tag[0])))?;
        let ndim = read_u32(&mut r)?;
        let dims = (0..ndim).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c as usize),
            [r, c] => (*r as usize, *c as usize),
            _ => return Err(fmt_err(format!("'{name}' has unsupported rank {ndim}"))),
        };
        let count = rows
            .checked_mul(cols)
            .filter(|c| *c <= 1 << 28)
            .ok_or_else(|| fmt_err(format!("'{name}' is implausibly large")))?;
        let mut raw = vec![0u8; count * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name, partition, Tensor::from_vec(rows, cols, data)?)?;
    }
    Ok((params, metadata))
}

pub fn save(path: &std::path::Path, params: &ParamSet, metadata: &serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), params, metadata)
}

pub fn load(path: &std::path::Path) -> Result<(ParamSet, serde_json::Value)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
