//! Flat parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DYD1" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf-8 | ndim: u32 | dims: ndim x u64 | values: f64... )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Tensor, TensorMap};
use super::NumericsError;
use crate::scalar::Scalar;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DYD1";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn write_archive<T: Scalar, W: Write>(w: &mut W, tensors: &TensorMap<T>) -> Result<(), NumericsError> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<T: Scalar, R: Read>(r: &mut R) -> Result<TensorMap<T>, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(NumericsError::Archive(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != ARCHIVE_VERSION {
        return Err(NumericsError::Archive(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NumericsError::Archive(format!("non-utf8 name: {e}")))?;
        let ndim = read_u32(r)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(NumericsError::Archive(format!("`{name}`: bad rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(NumericsError::Archive(format!("duplicate record `{name}`")));
        }
    }
    Ok(out)
}

pub fn save_archive<T: Scalar>(path: &Path, tensors: &TensorMap<T>) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_archive<T: Scalar>(path: &Path) -> Result<TensorMap<T>, NumericsError> {
    read_archive(&mut BufReader::new(File::open(path)?))
}
