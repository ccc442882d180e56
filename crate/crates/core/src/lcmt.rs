//! LCMT tensor files.
//!
//! Layout, all little-endian: magic `LCMT`, version `u16`, dtype `u16`
//! (1 = f32, 2 = f64), rank `u32`, one `u64` per dimension, then the
//! row-major payload. Several tensors may be concatenated in one stream.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCMT";
pub const VERSION: u16 = 1;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&T::DTYPE_CODE.to_le_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
    match T::DTYPE_CODE {
        1 => t
            .data()
            .iter()
            .for_each(|v| payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
        _ => t
            .data()
            .iter()
            .for_each(|v| payload.extend_from_slice(&v.as_f64().to_le_bytes())),
    }
    out.write_all(&payload)
}

fn read_exact<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(buf)
}

/// Reads one tensor, converting the stored dtype to `T`.
pub fn read_tensor<T: Real, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let magic = read_exact::<4, _>(input)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = u16::from_le_bytes(read_exact(input)?);
    let elem = match dtype {
        1 => 4,
        2 => 8,
        d => return Err(Error::Format(format!("unknown dtype code {d}"))),
    };
    let rank = u32::from_le_bytes(read_exact(input)?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_exact(input)?) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * elem];
    input
        .read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = match dtype {
        1 => raw
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => raw
            .chunks_exact(8)
            .map(|c| T::of_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    save_all(path, std::slice::from_ref(t))
}

pub fn save_all<T: Real>(path: &Path, tensors: &[Tensor<T>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut bytes.as_slice())
}

pub fn load_all<T: Real>(path: &Path) -> Result<Vec<Tensor<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let mut out = Vec::new();
    while !cursor.is_empty() {
        out.push(read_tensor(&mut cursor)?);
    }
    Ok(out)
}
