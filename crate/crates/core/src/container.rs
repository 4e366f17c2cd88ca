//! Tiny binary container for lists of dense matrices.
//!
//! Layout (all little-endian): 4-byte magic, `u32` version, `u32` entry
//! count, then `(rows: u32, cols: u32)` per entry, then every entry's values
//! as row-major `f64`.

use crate::error::{Error, Result};
use crate::Mat;
use std::io::{Read, Write};

pub const VERSION: u32 = 1;

pub fn write<W: Write>(mut w: W, magic: &[u8; 4], mats: &[&Mat]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(mats.len() as u32).to_le_bytes())?;
    for m in mats {
        w.write_all(&(m.nrows() as u32).to_le_bytes())?;
        w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    }
    for m in mats {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<Vec<Mat>> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| Error::Format("truncated header".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        dims.push((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize));
    }
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for (rows, cols) in dims {
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated payload".into()))?;
            vals.push(f64::from_le_bytes(buf));
        }
        out.push(Mat::from_row_slice(rows, cols, &vals));
    }
    Ok(out)
}
