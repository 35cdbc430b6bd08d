//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DNFT" | version u8 (=1) | dtype u8 (0 = f32) | ndim u8 | ndim x u32 dims | payload
//! ```
//!
//! The payload is the row-major element array, `product(dims) * 4` bytes.
//! A zero-dimensional container holds exactly one element.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DNFT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Upper bound on elements accepted from a stream, so a corrupt header
/// cannot trigger an unbounded allocation.
pub const MAX_STREAM_ELEMENTS: usize = 1 << 28;

const HEADER_LEN: usize = 7;

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn header(dims: &[usize]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::param(format!("rank {} exceeds 255", dims.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::param(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

/// Serialize an `f32` array with the given shape.
pub fn encode_f32(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if element_count(dims) != Some(data.len()) {
        return Err(Error::param(format!(
            "shape {dims:?} does not match {} elements",
            data.len()
        )));
    }
    let mut out = header(dims)?;
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    encode_f32(tensor.shape(), &tensor.to_f32())
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("tensor container", "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("tensor container", "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            "tensor container",
            format!("unsupported version {}", bytes[4]),
        ));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::format(
            "tensor container",
            format!("unsupported dtype {}", bytes[5]),
        ));
    }
    let ndim = bytes[6] as usize;
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::format("tensor container", "truncated dimensions"));
    }
    let dims = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((dims, dims_end))
}

/// Decode a complete container; trailing bytes are rejected.
pub fn decode_f32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (dims, offset) = parse_header(bytes)?;
    let count = element_count(&dims)
        .ok_or_else(|| Error::format("tensor container", "element count overflows"))?;
    let payload = &bytes[offset..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::format(
            "tensor container",
            format!(
                "payload is {} bytes, shape {dims:?} needs {count} elements",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (dims, data) = decode_f32(bytes)?;
    Tensor::from_f32(dims, &data)
}

pub fn write_tensor<W: Write>(mut w: W, tensor: &Tensor) -> Result<()> {
    w.write_all(&encode(tensor)?)?;
    Ok(())
}

/// Read one container from a stream, consuming exactly its bytes.
pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    let ndim = head[6] as usize;
    let mut buf = head.to_vec();
    buf.resize(HEADER_LEN + 4 * ndim, 0);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    let (dims, _) = parse_header(&buf)?;
    let count = element_count(&dims)
        .filter(|&n| n <= MAX_STREAM_ELEMENTS)
        .ok_or_else(|| Error::format("tensor container", format!("shape {dims:?} too large")))?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)?;
    buf.extend_from_slice(&payload);
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_f32(&[2, 3], &[0.0; 6]).unwrap();
        assert_eq!(&bytes[..4], b"DNFT");
        assert_eq!(bytes[4..7], [1, 0, 2]);
        assert_eq!(bytes[7..11], 2u32.to_le_bytes());
        assert_eq!(bytes[11..15], 3u32.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 24);
    }

    #[test]
    fn scalar_and_empty_edge_cases() {
        let bytes = encode_f32(&[], &[1.5]).unwrap();
        assert_eq!(bytes.len(), 7 + 4);
        assert_eq!(decode_f32(&bytes).unwrap(), (vec![], vec![1.5]));

        let bytes = encode_f32(&[4, 0], &[]).unwrap();
        assert_eq!(decode_f32(&bytes).unwrap(), (vec![4, 0], vec![]));
    }

    #[test]
    fn rejects_corruption() {
        let good = encode_f32(&[2], &[1.0, 2.0]).unwrap();
        assert!(decode_f32(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_f32(&extra).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode_f32(&magic).is_err());
        let mut dtype = good.clone();
        dtype[5] = 1;
        assert!(decode_f32(&dtype).is_err());
        assert!(encode_f32(&[3], &[1.0]).is_err());
    }

    #[test]
    fn stream_read_consumes_one_frame() {
        let a = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = Tensor::scalar(7.0);
        let mut buf = encode(&a).unwrap();
        buf.extend(encode(&b).unwrap());
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(read_tensor(&mut cursor).unwrap(), a);
        assert_eq!(read_tensor(&mut cursor).unwrap(), b);
    }

    #[test]
    fn stream_rejects_huge_shapes() {
        let mut bytes = header(&[1 << 20, 1 << 20]).unwrap();
        bytes.extend_from_slice(&[0; 16]);
        assert!(read_tensor(std::io::Cursor::new(bytes)).is_err());
    }

    fn shape_and_bits() -> impl Strategy<Value = (Vec<usize>, Vec<u32>)> {
        prop::collection::vec(0usize..5, 0..4).prop_flat_map(|dims| {
            let n = dims.iter().product::<usize>();
            (Just(dims), prop::collection::vec(any::<u32>(), n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_is_bitwise((dims, bits) in shape_and_bits()) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let bytes = encode_f32(&dims, &data).unwrap();
            let (dims2, data2) = decode_f32(&bytes).unwrap();
            prop_assert_eq!(dims2, dims);
            let bits2: Vec<u32> = data2.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits2, bits);
        }
    }
}
