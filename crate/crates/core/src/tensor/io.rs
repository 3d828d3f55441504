//! SRTT binary tensor files.
//!
//! Layout (all little-endian): `b"SRTT"`, `u32` version = 1, `u64` order `d`,
//! `d` × `u64` dims, then the values as `f64` in linear-index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::dense::DenseTensor;
use crate::tensor::shape::Shape;

pub const SRTT_MAGIC: &[u8; 4] = b"SRTT";
pub const SRTT_VERSION: u32 = 1;

pub fn write_tensor(x: &DenseTensor, w: &mut impl Write) -> Result<()> {
    w.write_all(SRTT_MAGIC)?;
    w.write_all(&SRTT_VERSION.to_le_bytes())?;
    write_dims(w, x.dims())?;
    write_f64s(w, x.data())
}

pub fn read_tensor(r: &mut impl Read) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SRTT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected SRTT")));
    }
    let version = read_u32(r)?;
    if version != SRTT_VERSION {
        return Err(Error::Format(format!("unsupported SRTT version {version}")));
    }
    let dims = read_dims(r)?;
    let shape = Shape::new(dims)?;
    let data = read_f64s(r, shape.len())?;
    DenseTensor::new(shape, data)
}

pub fn save_tensor(x: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(x, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_usize(r: &mut impl Read) -> Result<usize> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in usize")))
}

/// Length-prefixed dimension list.
pub(crate) fn write_dims(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    write_u64(w, dims.len() as u64)?;
    for &n in dims {
        write_u64(w, n as u64)?;
    }
    Ok(())
}

pub(crate) fn read_dims(r: &mut impl Read) -> Result<Vec<usize>> {
    let d = read_usize(r)?;
    if d == 0 || d > 64 {
        return Err(Error::Format(format!("implausible order {d}")));
    }
    (0..d).map(|_| read_usize(r)).collect()
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    const CHUNK: usize = 8192;
    let mut buf = Vec::with_capacity(CHUNK * 8);
    for chunk in values.chunks(CHUNK) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    const CHUNK: usize = 8192;
    let mut out = Vec::with_capacity(len);
    let mut buf = vec![0u8; CHUNK * 8];
    while out.len() < len {
        let take = (len - out.len()).min(CHUNK);
        let bytes = &mut buf[..take * 8];
        r.read_exact(bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::Format(format!("truncated data: expected {len} values"))
            }
            _ => Error::Io(e),
        })?;
        out.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    }
    Ok(out)
}
