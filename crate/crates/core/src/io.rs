//! Tensor files and PGM export.
//!
//! A tensor file is an ASCII header line `RSD1 <f32|f64> <ndim> <d0> … \n`
//! followed by exactly `∏dᵢ` little-endian values in row-major order.
//! Images are stored as `H W` when single-channel and `C H W` otherwise.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::TensorImage;

pub const TENSOR_MAGIC: &str = "RSD1";
const MAX_HEADER: usize = 256;

pub(crate) fn decode_values<S: Scalar>(bytes: &[u8], dtype: DType) -> Vec<S> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    }
}

pub fn encode_tensor<S: Scalar>(img: &TensorImage<S>) -> Vec<u8> {
    let (c, h, w) = img.dims();
    let header = if c == 1 {
        format!("{TENSOR_MAGIC} {} 2 {h} {w}\n", S::DTYPE.name())
    } else {
        format!("{TENSOR_MAGIC} {} 3 {c} {h} {w}\n", S::DTYPE.name())
    };
    let mut out = Vec::with_capacity(header.len() + img.len() * S::DTYPE.size());
    out.extend_from_slice(header.as_bytes());
    for &v in img.data() {
        v.write_le(&mut out);
    }
    out
}

/// Element type recorded in a tensor file header.
pub fn tensor_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(parse_header(bytes)?.0)
}

fn parse_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    let end = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::corrupt("missing tensor header line"))?;
    let line = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::corrupt("tensor header is not ASCII"))?;
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(TENSOR_MAGIC) {
        return Err(Error::corrupt(format!(
            "bad tensor magic in header {line:?}"
        )));
    }
    let dtype = parts
        .next()
        .and_then(DType::parse)
        .ok_or_else(|| Error::corrupt(format!("bad dtype in header {line:?}")))?;
    let ndim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::corrupt(format!("bad ndim in header {line:?}")))?;
    let dims: Vec<usize> = parts
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::corrupt(format!("bad dimension {s:?}")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != ndim {
        return Err(Error::corrupt(format!(
            "header declares {ndim} dims but lists {}",
            dims.len()
        )));
    }
    Ok((dtype, dims, end + 1))
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<TensorImage<S>> {
    let (dtype, dims, offset) = parse_header(bytes)?;
    let (c, h, w) = match dims[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::corrupt(format!(
                "expected 2 or 3 dims, got {}",
                dims.len()
            )))
        }
    };
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::corrupt(format!("tensor dims {dims:?} overflow")))?;
    let payload = &bytes[offset..];
    if payload.len() != count {
        return Err(Error::corrupt(format!(
            "payload is {} bytes, header needs {count}",
            payload.len()
        )));
    }
    TensorImage::new(h, w, c, decode_values(payload, dtype))
        .map_err(|e| Error::corrupt(e.to_string()))
}

pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, img: &TensorImage<S>) -> Result<()> {
    fs::write(path, encode_tensor(img))?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<TensorImage<S>> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path)?).map_err(|e| match e {
        Error::Corrupt(m) => Error::corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// 8-bit binary PGM of channel 0, values clamped to `[lo, hi]`.
pub fn encode_pgm<S: Scalar>(img: &TensorImage<S>, lo: f64, hi: f64) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(img.plane(0).iter().map(|v| {
        let u = ((v.as_f64() - lo) / span).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }));
    out
}

pub fn write_pgm<S: Scalar>(
    path: impl AsRef<Path>,
    img: &TensorImage<S>,
    lo: f64,
    hi: f64,
) -> Result<()> {
    fs::write(path, encode_pgm(img, lo, hi))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, stream_rng};

    #[test]
    fn round_trip_f64_is_bit_exact() {
        let img = gaussian_image::<f64>(32, 32, 1, &mut stream_rng(1, 0));
        let bytes = encode_tensor(&img);
        let back: TensorImage<f64> = decode_tensor(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_tensor(&back), bytes);
    }

    #[test]
    fn multichannel_round_trip() {
        let img = gaussian_image::<f32>(5, 7, 3, &mut stream_rng(2, 0));
        let bytes = encode_tensor(&img);
        assert!(bytes.starts_with(b"RSD1 f32 3 3 5 7\n"));
        assert_eq!(decode_tensor::<f32>(&bytes).unwrap(), img);
    }

    #[test]
    fn header_example() {
        let mut bytes = b"RSD1 f32 2 4 4\n".to_vec();
        for i in 0..16 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        assert_eq!(bytes.len(), 15 + 64);
        let img: TensorImage<f64> = decode_tensor(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (4, 4, 1));
        assert_eq!(img.get(0, 3, 1), 13.0);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let img = TensorImage::<f64>::zeros(4, 4);
        let bytes = encode_tensor(&img);
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode_tensor::<f64>(truncated),
            Err(Error::Corrupt(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_tensor::<f64>(&extra),
            Err(Error::Corrupt(_))
        ));
        for bad in [
            &b"RSD2 f32 2 1 1\n\0\0\0\0"[..],
            b"RSD1 f16 2 1 1\n\0\0",
            b"RSD1 f32 3 1 1\n\0\0\0\0",
            b"RSD1 f32 2 1\n",
            b"RSD1 f32 2 18446744073709551615 4\n",
            b"RSD1 f32 1 4\n\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0",
            b"no newline",
        ] {
            assert!(
                matches!(decode_tensor::<f64>(bad), Err(Error::Corrupt(_))),
                "{:?}",
                String::from_utf8_lossy(bad)
            );
        }
        let mut nan = b"RSD1 f64 2 1 1\n".to_vec();
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_tensor::<f64>(&nan).is_err());
    }

    #[test]
    fn pgm_layout() {
        let img = TensorImage::<f64>::from_rows(&[&[0.0, 1.0, 2.0]]).unwrap();
        let p = encode_pgm(&img, 0.0, 1.0);
        assert_eq!(&p[..11], b"P5\n3 1\n255\n");
        assert_eq!(&p[11..], &[0, 255, 255]);
    }
}
