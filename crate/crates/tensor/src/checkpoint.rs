//! Flat binary container for named parameters.
//!
//! Layout (all integers u64 little-endian, floats f64 little-endian):
//!
//! ```text
//! "DENSUP01" | count | { name_len | name (utf-8) | rank | extents.. | data.. } * count
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DENSUP01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic header {0:?}")]
    BadMagic([u8; 8]),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u64(&mut w, params.len() as u64)?;
    for (name, t) in params {
        put_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(&mut w, t.rank() as u64)?;
        for &e in t.shape() {
            put_u64(&mut w, e as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let count = get_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = get_u64(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Malformed(format!("parameter name: {e}")))?;
        let rank = get_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| get_u64(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
