//! Binary tensor files.
//!
//! Layout: magic `MTEN`, one dtype byte (0 = f32, 1 = f64), one ndim byte,
//! `ndim` little-endian u64 dimensions, then the raw little-endian scalars.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MTEN";

pub fn encode<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + tensor.shape().len() * 8 + tensor.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(tensor.shape().len() as u8);
    for &dim in tensor.shape() {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &str) -> Result<Tensor<T>> {
    let parse = |offset: usize, detail: &str| Error::Parse {
        path: path.to_string(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 6 {
        return Err(parse(0, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(parse(0, "bad magic, expected MTEN"));
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| parse(4, "unknown dtype code"))?;
    if dtype != T::DTYPE {
        return Err(parse(
            4,
            &format!("dtype is {:?}, expected {:?}", dtype, T::DTYPE),
        ));
    }
    let ndim = bytes[5] as usize;
    let dims_end = 6 + ndim * 8;
    if bytes.len() < dims_end {
        return Err(parse(6, "truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let start = 6 + i * 8;
        let dim = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        shape.push(dim as usize);
    }
    let count: usize = shape.iter().product();
    let elem = T::DTYPE.size_bytes();
    let expected = dims_end + count * elem;
    if bytes.len() != expected {
        return Err(parse(
            dims_end,
            &format!("payload is {} bytes, expected {}", bytes.len() - dims_end, count * elem),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        data.push(T::read_le(&bytes[dims_end + i * elem..]));
    }
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, -0.5, 1e-7])
            .unwrap();
        let back: Tensor<f32> = decode(&encode(&t), "mem").unwrap();
        assert_eq!(t, back);

        let t64 = Tensor::<f64>::from_vec(vec![4], vec![1.0, -1.0, std::f64::consts::PI, 1e-300])
            .unwrap();
        let back64: Tensor<f64> = decode(&encode(&t64), "mem").unwrap();
        assert_eq!(t64.data(), back64.data());
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let t = Tensor::<f32>::scalar(1.0);
        let mut bytes = encode(&t);
        bytes[0] = b'X';
        let err = decode::<f32>(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("offset 0"));

        let bytes = encode(&t);
        assert!(decode::<f64>(&bytes, "mem").is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t);
        let err = decode::<f64>(&bytes[..bytes.len() - 1], "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
