//! Flat binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes   b"FDCK"
//! version    u32       1
//! entries    u32       number of named tensors
//! per entry:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 each)
//! values     f64 × Σ product(dims), entries concatenated in header order
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};

pub const MAGIC: &[u8; 4] = b"FDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Vec<usize>)>,
    pub values: Vec<f64>,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn new(entries: Vec<(String, Vec<usize>)>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if expected != values.len() {
            return Err(TensorError::Checkpoint(format!(
                "header describes {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Checkpoint { entries, values })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io_err)?;
        for (name, shape) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io_err)?;
            let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io_err)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            entries.push((name, shape));
        }
        let total: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let mut values = Vec::with_capacity(total);
        let mut b = [0u8; 8];
        for _ in 0..total {
            r.read_exact(&mut b).map_err(io_err)?;
            values.push(f64::from_le_bytes(b));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io_err)?;
        if !rest.is_empty() {
            return Err(TensorError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { entries, values })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}
