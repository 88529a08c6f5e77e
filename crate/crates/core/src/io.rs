//! The `VTNS` binary tensor container.
//!
//! Layout: magic `VTNS`, version byte `1`, dtype byte (`1` = f32, `2` = f64),
//! rank byte, `rank` little-endian `u64` extents, then the row-major
//! little-endian payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"VTNS";
pub const TENSOR_VERSION: u8 = 1;

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in a byte", t.rank())))?;
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.len() * S::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(S::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Reads one container, converting the payload to `S` if the stored dtype differs.
pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "tensor header")?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..4]),
            "VTNS"
        )));
    }
    if head[4] != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {} (expected {TENSOR_VERSION})",
            head[4]
        )));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_exact(r, &mut d, "tensor extents")?;
        shape.push(
            usize::try_from(u64::from_le_bytes(d))
                .map_err(|_| Error::Format("extent overflows usize".into()))?,
        );
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("element count overflows for {shape:?}")))?;
    let mut payload = vec![0u8; n * dtype.size()];
    read_exact(r, &mut payload, "tensor payload")?;
    let data: Vec<S> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| S::c(f32::read_le(b) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| S::from_f64(f64::read_le(b)).unwrap_or_else(S::nan))
            .collect(),
    };
    debug_assert_eq!(numel(&shape), data.len());
    Tensor::new(shape, data)
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}
