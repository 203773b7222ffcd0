//! Binary tensor records.
//!
//! Layout (little-endian): magic `DSEG`, version `u32`, four `u64` extents
//! (n, c, h, w), dtype tag `u8`, then the raw scalars in storage order.

use std::io::{Read, Write};

use super::{DType, Scalar, Shape4, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"DSEG";
pub const TENSOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 8 + 1;

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + t.len() * T::DTYPE.size());
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    for d in t.shape().dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut header = [0u8; HEADER_LEN];
    read_exact(input, &mut header, "tensor header")?;
    if header[0..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let start = 8 + i * 8;
        let v = u64::from_le_bytes(header[start..start + 8].try_into().unwrap());
        *d = usize::try_from(v).map_err(|_| Error::Format("extent exceeds usize".into()))?;
    }
    let dtype = DType::from_tag(header[HEADER_LEN - 1])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", header[HEADER_LEN - 1])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "tensor stored as {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])
        .map_err(|e| Error::Format(format!("invalid stored shape: {e}")))?;
    let width = dtype.size();
    let bytes_len = shape
        .len()
        .checked_mul(width)
        .ok_or_else(|| Error::Format("tensor payload overflows".into()))?;
    let mut bytes = vec![0u8; bytes_len];
    read_exact(input, &mut bytes, "tensor payload")?;
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated {what}"))
        } else {
            Error::Io(e)
        }
    })
}
