//! Binary checkpoints.
//!
//! Layout (little-endian): magic `RSDC`, `u32` version, the network config
//! (`u32` base_channels, depth, `u8` attention flag, `u32` window_size,
//! heads, time_embed_dim), `u32` tensor count, then per tensor `u32` name
//! length, name bytes, `u8` dtype, `u32` ndim, `u64` dims, payload. A
//! trailing `u64` CRC-64/ECMA-182 covers every preceding byte.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};
use crate::io::decode_values;
use crate::nn::{check_params, Array, NetConfig, ParamSet, Variant};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSDC";
pub const CHECKPOINT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::arg(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<S: Scalar>(params: &ParamSet<S>, config: &NetConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, config.base_channels)?;
    put_u32(&mut out, config.depth)?;
    out.push(config.use_window_attention as u8);
    put_u32(&mut out, config.window_size)?;
    put_u32(&mut out, config.heads)?;
    put_u32(&mut out, config.time_embed_dim)?;
    put_u32(&mut out, params.len())?;
    for (name, value) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE.tag());
        put_u32(&mut out, value.shape().len())?;
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            v.write_le(&mut out);
        }
    }
    let sum = CRC64.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(ParamSet<S>, NetConfig)> {
    if bytes.len() < 16 {
        return Err(Error::corrupt("checkpoint too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::corrupt(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = NetConfig {
        base_channels: r.u32()?,
        depth: r.u32()?,
        use_window_attention: match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::corrupt(format!("bad attention flag {b}"))),
        },
        window_size: r.u32()?,
        heads: r.u32()?,
        time_embed_dim: r.u32()?,
    };
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::corrupt("tensor name is not UTF-8"))?
            .to_owned();
        if params.contains(&name) {
            return Err(Error::corrupt(format!("duplicate tensor {name:?}")));
        }
        let dtype = DType::from_tag(r.u8()?)
            .ok_or_else(|| Error::corrupt(format!("bad dtype for {name:?}")))?;
        let ndim = r.u32()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape
                .push(usize::try_from(r.u64()?).map_err(|_| Error::corrupt("dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::corrupt(format!("dimension overflow in {name:?}")))?;
        let values = decode_values::<S>(r.take(n)?, dtype);
        let arr = Array::new(shape, values).map_err(|e| Error::corrupt(e.to_string()))?;
        if !arr.all_finite() {
            return Err(Error::corrupt(format!("non-finite values in {name:?}")));
        }
        params.insert(&name, arr);
    }
    if r.pos != body.len() {
        return Err(Error::corrupt("trailing bytes after the last tensor"));
    }
    config
        .validate()
        .map_err(|e| Error::corrupt(e.to_string()))?;
    check_params(&params, &config).map_err(|e| Error::corrupt(e.to_string()))?;
    Ok((params, config))
}

pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    params: &ParamSet<S>,
    config: &NetConfig,
) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(ParamSet<S>, NetConfig)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and insists on a variant.
pub fn load_checkpoint_as<S: Scalar>(
    path: impl AsRef<Path>,
    expected: Variant,
) -> Result<(ParamSet<S>, NetConfig)> {
    let (params, config) = load_checkpoint(path)?;
    let found = config.variant();
    if found != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds a {found} network but {expected} was requested"
        )));
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn small(attn: bool) -> NetConfig {
        NetConfig {
            base_channels: 4,
            depth: 1,
            use_window_attention: attn,
            window_size: 4,
            heads: 2,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for attn in [false, true] {
            let cfg = small(attn);
            let p = init_params::<f64>(&cfg, 3).unwrap();
            let bytes = encode_checkpoint(&p, &cfg).unwrap();
            let (q, c) = decode_checkpoint::<f64>(&bytes).unwrap();
            assert_eq!(c, cfg);
            for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
                assert_eq!(na, nb);
                assert_eq!(a.shape(), b.shape());
                assert!(a
                    .data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let cfg = small(false);
        let p = init_params::<f32>(&cfg, 3).unwrap();
        let bytes = encode_checkpoint(&p, &cfg).unwrap();
        for i in (0..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(decode_checkpoint::<f32>(&b).is_err(), "byte {i}");
        }
        let mut b = bytes.clone();
        let mid = b.len() / 2;
        b[mid] ^= 1;
        assert!(matches!(
            decode_checkpoint::<f32>(&b),
            Err(Error::Checksum { .. })
        ));
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn variant_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.ckpt");
        let cfg = small(false);
        save_checkpoint(&path, &init_params::<f32>(&cfg, 1).unwrap(), &cfg).unwrap();
        let err = load_checkpoint_as::<f32>(&path, Variant::Swin).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ConfigMismatch(_)));
        assert!(msg.contains("conv") && msg.contains("swin"), "{msg}");
        assert!(load_checkpoint_as::<f32>(&path, Variant::Conv).is_ok());
    }
}
