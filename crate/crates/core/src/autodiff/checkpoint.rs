//! Named-tensor archive.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "MILELTNS"
//! version u32      1
//! count   u32
//! count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim, values f64 x prod(dims) }
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

const MAGIC: &[u8; 8] = b"MILELTNS";
const VERSION: u32 = 1;

pub fn write_archive<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), AutodiffError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AutodiffError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, AutodiffError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("not a tensor archive (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)?;
        if ndim != 2 {
            return Err(AutodiffError::Checkpoint(format!("{name}: expected 2 dims, found {ndim}")));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(out)
}

pub fn save_params<W: Write>(w: W, store: &ParamStore) -> Result<(), AutodiffError> {
    write_archive(w, store.iter().map(|p| (p.name.as_str(), &p.value)))
}

/// Overwrites every parameter in `store` from the archive. Missing names and
/// shape mismatches are errors; extra archive entries are ignored.
pub fn load_params<R: Read>(r: R, store: &mut ParamStore) -> Result<(), AutodiffError> {
    let archive = read_archive(r)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let (_, t) = archive
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("archive has no tensor named {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(AutodiffError::Checkpoint(format!(
                "{}: archive shape {:?} does not match parameter shape {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}
