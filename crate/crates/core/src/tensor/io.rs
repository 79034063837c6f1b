//! `CDT1` tensor container: magic, dtype code (u8), rank (u8), extents as
//! little-endian u64, then little-endian element data.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDT1";

pub fn write_tensor_to<T: Float, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

/// Reads a tensor, converting from the stored dtype to `T` when they
/// differ.
pub fn read_tensor_from<T: Float, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let bad = |msg: &str| Error::Validation(format!("CDT1: {msg}"));
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let dtype = DType::from_code(head[4]).ok_or_else(|| bad("unknown dtype code"))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e).map_err(|_| bad("truncated extents"))?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * dtype.size()];
    r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write_tensor<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor_to(t, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        let mut want = b"CDT1".to_vec();
        want.push(0);
        want.push(1);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn round_trip_and_cast() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 1], |i| i as f64 * 0.25 - 1.0);
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        let back: Tensor<f64> = read_tensor_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let as32: Tensor<f32> = read_tensor_from(buf.as_slice()).unwrap();
        assert_eq!(as32.shape(), &[2, 3, 1]);
        assert_eq!(as32.data()[5], 0.25);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_tensor_from::<f32, _>(&b"CDT2\x00\x00"[..]).is_err());
        assert!(read_tensor_from::<f32, _>(&b"CDT1\x07\x00"[..]).is_err());
        let t = Tensor::<f32>::zeros(&[4]);
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor_from::<f32, _>(buf.as_slice()).is_err());
    }
}
