//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `RGCK`, `u32` format version, `u32` metadata
//! length and UTF-8 metadata, `u32` parameter count, then a manifest entry per
//! parameter (`u32` name length, name, `u32` rank, `u64` per dimension),
//! followed by every parameter's values as row-major `f64` in manifest order.

use std::io::{Read, Write};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RGCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParamSet, metadata: &str) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(metadata.len() as u32).to_le_bytes())?;
    out.write_all(metadata.as_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for p in params.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

/// Returns the parameters and the metadata string.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ParamSet, String)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta_len = read_u32(&mut input)? as usize;
    let metadata = read_string(&mut input, meta_len)?;
    let count = read_u32(&mut input)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let name = read_string(&mut input, name_len)?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(truncated)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        manifest.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    Ok((params, metadata))
}
