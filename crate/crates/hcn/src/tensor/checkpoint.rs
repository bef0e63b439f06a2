//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"HCNP"
//! u32    version = 1
//! u32    parameter count
//! per parameter:
//!   u32        name byte length, then that many UTF-8 bytes
//!   u8         rank
//!   rank × u32 dimensions
//!   f32 × numel  row-major values
//! ```
//!
//! Values are stored in f32; loading widens back to f64.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"HCNP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a parameter checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params
            .add(name, tensor)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok(params)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
