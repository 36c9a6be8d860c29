//! `EQT1` binary tensor dumps.
//!
//! Layout: magic `EQT1`, `u8` dtype (0 = f32, 1 = f64), `u8` rank, two zero
//! bytes, `rank` little-endian `u32` extents, then the row-major
//! little-endian scalars.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const EQT_MAGIC: &[u8; 4] = b"EQT1";

/// A decoded dump whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn write_eqt_to<T: Scalar, W: Write>(t: &Tensor<T>, mut out: W) -> Result<()> {
    let rank =
        u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} does not fit in a byte", t.rank())))?;
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + T::BYTES * t.len());
    buf.extend_from_slice(EQT_MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(rank);
    buf.extend_from_slice(&[0, 0]);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} does not fit in u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_eqt<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_eqt_to(t, std::io::BufWriter::new(file))
}

fn decode<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if payload.len() != n * T::BYTES {
        return Err(Error::Format(format!(
            "expected {} payload bytes for shape {shape:?}, found {}",
            n * T::BYTES,
            payload.len()
        )));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_eqt_from<R: Read>(mut input: R) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != EQT_MAGIC {
        return Err(Error::Format("missing EQT1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::Format("non-zero padding bytes".into()));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = &bytes[header..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode(shape, payload)?),
    })
}

/// Reads a dump and insists on element type `T`.
pub fn read_eqt<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let any = read_eqt_from(std::io::BufReader::new(fs::File::open(path)?))?;
    let found = any.dtype();
    match any {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
        _ => Err(Error::DType {
            expected: T::DTYPE,
            found,
        }),
    }
}
