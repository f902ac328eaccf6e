//! `.rtn` raw tensor files: `RTN1`, u8 dtype, u8 ndim, ndim × u32 LE dims,
//! then the raw little-endian values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{decode_le, DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const RTN_MAGIC: &[u8; 4] = b"RTN1";

pub fn write_rtn_to<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid("write_rtn", "too many axes"));
    }
    let mut buf = Vec::with_capacity(6 + 4 * t.ndim() + t.len() * T::DTYPE.size());
    buf.extend_from_slice(RTN_MAGIC);
    buf.push(T::DTYPE as u8);
    buf.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("write_rtn", "axis exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_rtn<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let f = fs::File::create(path)?;
    write_rtn_to(t, std::io::BufWriter::new(f))
}

pub fn read_rtn_from<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_rtn(&bytes)
}

pub fn read_rtn<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    parse_rtn(&fs::read(path)?)
}

pub(crate) fn parse_rtn<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 {
        return Err(Error::Truncated("rtn header".into()));
    }
    if &bytes[..4] != RTN_MAGIC {
        return Err(Error::Format("bad rtn magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown rtn dtype {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::Format("rtn tensor with zero axes".into()));
    }
    let dims_end = 6 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Truncated("rtn dims".into()));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("rtn zero-sized axis {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("rtn shape overflows".into()))?;
    let payload = n
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("rtn shape overflows".into()))?;
    let body = &bytes[dims_end..];
    if body.len() < payload {
        return Err(Error::Truncated(format!(
            "rtn payload: need {payload} bytes, have {}",
            body.len()
        )));
    }
    if body.len() > payload {
        return Err(Error::Format("trailing bytes after rtn payload".into()));
    }
    Tensor::new(shape, decode_le(body, dtype))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let t = Tensor::<f32>::from_fn([2, 3, 4], |i| (i as f32).sin() * 1e-3);
        let mut buf = Vec::new();
        write_rtn_to(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"RTN1");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 3);
        let back: Tensor<f32> = parse_rtn(&buf).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncation_and_magic_errors_are_distinct() {
        let t = Tensor::<f64>::ones([4]);
        let mut buf = Vec::new();
        write_rtn_to(&t, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(parse_rtn::<f64>(cut), Err(Error::Truncated(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(parse_rtn::<f64>(&bad), Err(Error::Format(_))));
    }
}
