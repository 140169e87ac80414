//! Tensor blob file format used by datasets and checkpoints.
//!
//! Layout: a 16-byte header (magic `TNS1`, dtype code, rank, reserved
//! zeros), four little-endian u32 dims (n, c, h, w), then the raw
//! little-endian scalar payload in row-major order with w fastest.

use super::{Dtype, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"TNS1";
const HEADER_LEN: usize = 16;

/// Parsed blob header; exposed so callers can inspect dtype before reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobHeader {
    pub dtype: Dtype,
    pub shape: Shape,
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = T::DTYPE.code();
    header[5] = 4; // rank
    w.write_all(&header)?;
    for d in t.shape().dims() {
        let d_u32 = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32 in blob write")))?;
        w.write_all(&d_u32.to_le_bytes())?;
    }
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<BlobHeader> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("{}: short header: {e}", path.display())))?;
    if header[..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &header[..4]
        )));
    }
    let dtype = Dtype::from_code(header[4])?;
    if header[5] != 4 {
        return Err(Error::Format(format!(
            "{}: unsupported rank {}",
            path.display(),
            header[5]
        )));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("{}: short dims: {e}", path.display())))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    Ok(BlobHeader {
        dtype,
        shape: Shape::new(dims[0], dims[1], dims[2], dims[3]),
    })
}

/// Read only the header of a blob file.
pub fn read_tensor_header(path: &Path) -> Result<BlobHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, path)
}

/// Read a blob as `T`. The stored dtype must match `T` exactly; no silent
/// conversion happens on disk boundaries.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Validation(format!(
            "{}: blob holds {} but {} was requested",
            path.display(),
            header.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let count = header.shape.count();
    let mut payload = vec![0u8; count * header.dtype.size_bytes()];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("{}: short payload: {e}", path.display())))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match header.dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                data.push(T::from_f64(v as f64));
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                let v = f64::from_le_bytes([
                    chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6], chunk[7],
                ]);
                data.push(T::from_f64(v));
            }
        }
    }
    Tensor::from_vec(header.shape, data)
}
