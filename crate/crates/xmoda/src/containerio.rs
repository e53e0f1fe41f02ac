//! Binary array containers and checksum helpers.
//!
//! Two file formats live here, both little-endian and self-describing:
//!
//! * **Sample arrays** (`XMD1`): magic `XMD1`, `u32` height, `u32` width,
//!   `u32` channels, `u8` dtype tag, then the row-major payload. Dtype tags:
//!   0 = f32, 1 = f64, 2 = u8, 3 = u16. Images are stored as f32, masks as
//!   u8.
//! * **Tensor bundles** (`XMC1`): magic `XMC1`, `u8` dtype tag, `u32` tensor
//!   count, then per tensor: `u16` name length, name bytes, `u8` rank,
//!   rank x `u32` dims, payload. Floating-point payloads are raw IEEE bits,
//!   so a save/load round-trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::tensor::{Dtype, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed container: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: integrity check failed: {msg}")]
    Integrity { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

const SAMPLE_MAGIC: &[u8; 4] = b"XMD1";
const BUNDLE_MAGIC: &[u8; 4] = b"XMC1";

/// Payload of a sample array file.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
            ArrayData::U16(_) => 3,
        }
    }
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U16(v) => v.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One `XMD1` array: (channels, height, width), row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleArray {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: ArrayData,
}

pub fn write_sample(path: &Path, arr: &SampleArray) -> Result<(), IoError> {
    let expect = (arr.height * arr.width * arr.channels) as usize;
    assert_eq!(arr.data.len(), expect, "sample payload length mismatch");
    let mut buf = Vec::with_capacity(17 + expect * 4);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&arr.height.to_le_bytes());
    buf.extend_from_slice(&arr.width.to_le_bytes());
    buf.extend_from_slice(&arr.channels.to_le_bytes());
    buf.push(arr.data.tag());
    match &arr.data {
        ArrayData::F32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        ArrayData::F64(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        ArrayData::U8(v) => buf.extend_from_slice(v),
        ArrayData::U16(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    atomic_write(path, &buf)
}

pub fn read_sample(path: &Path) -> Result<SampleArray, IoError> {
    let buf = fs::read(path).map_err(|e| IoError::io(path, e))?;
    if buf.len() < 17 || &buf[..4] != SAMPLE_MAGIC {
        return Err(IoError::format(path, "missing XMD1 magic"));
    }
    let height = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let width = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let channels = u32::from_le_bytes(buf[12..16].try_into().unwrap());
    let tag = buf[16];
    let n = (height as usize) * (width as usize) * (channels as usize);
    let payload = &buf[17..];
    let width_bytes = match tag {
        0 => 4,
        1 => 8,
        2 => 1,
        3 => 2,
        t => return Err(IoError::format(path, format!("unknown dtype tag {t}"))),
    };
    if payload.len() != n * width_bytes {
        return Err(IoError::format(
            path,
            format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                n * width_bytes
            ),
        ));
    }
    let data = match tag {
        0 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        1 => ArrayData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        2 => ArrayData::U8(payload.to_vec()),
        _ => ArrayData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(SampleArray {
        height,
        width,
        channels,
        data,
    })
}

/// Write a named-tensor bundle with bit-exact float payloads.
pub fn write_bundle<F: Scalar>(
    path: &Path,
    tensors: &[(String, ArrayD<F>)],
) -> Result<(), IoError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.push(match F::DTYPE {
        Dtype::F32 => 0u8,
        Dtype::F64 => 1u8,
    });
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize);
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.ndim() as u8);
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match F::DTYPE {
            Dtype::F32 => {
                for v in t.iter() {
                    buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in t.iter() {
                    buf.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
    }
    atomic_write(path, &buf)
}

pub fn read_bundle<F: Scalar>(path: &Path) -> Result<Vec<(String, ArrayD<F>)>, IoError> {
    let buf = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], IoError> {
        if *at + n > buf.len() {
            return Err(IoError::format(path, "truncated bundle"));
        }
        let s = &buf[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != BUNDLE_MAGIC {
        return Err(IoError::format(path, "missing XMC1 magic"));
    }
    let tag = take(&mut at, 1)?[0];
    let want = match F::DTYPE {
        Dtype::F32 => 0u8,
        Dtype::F64 => 1u8,
    };
    if tag != want {
        return Err(IoError::format(
            path,
            format!(
                "bundle dtype tag {tag} does not match requested {}",
                F::DTYPE.name()
            ),
        ));
    }
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, nlen)?.to_vec())
            .map_err(|_| IoError::format(path, "tensor name not utf-8"))?;
        let rank = take(&mut at, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let elem = match F::DTYPE {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = take(&mut at, n * elem)?;
        let data: Vec<F> = match F::DTYPE {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| IoError::format(path, format!("bad tensor shape: {e}")))?;
        out.push((name, arr));
    }
    if at != buf.len() {
        return Err(IoError::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Write via a temp file + rename so readers never observe partial content.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| IoError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

pub fn sha256_hex_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

pub fn sha256_hex_file(path: &Path) -> Result<String, IoError> {
    let mut f = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| IoError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex_digest(h))
}

fn hex_digest(h: Sha256) -> String {
    use std::fmt::Write as _;
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xmd");
        let arr = SampleArray {
            height: 2,
            width: 3,
            channels: 1,
            data: ArrayData::F32(vec![0.0, -1.0, 1.0, 0.25, 0.5, -0.5]),
        };
        write_sample(&p, &arr).unwrap();
        assert_eq!(read_sample(&p).unwrap(), arr);
    }

    #[test]
    fn sample_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.xmd");
        std::fs::write(&p, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_sample(&p), Err(IoError::Format { .. })));
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.xmt");
        let mut rng = crate::rngutil::rng_from(3, "bundle");
        let a = crate::rngutil::normal_array::<f32>(&mut rng, &[3, 4], 1.0);
        let b = crate::rngutil::normal_array::<f32>(&mut rng, &[7], 0.3);
        let tensors = vec![("w".to_string(), a), ("b".to_string(), b)];
        write_bundle(&p, &tensors).unwrap();
        let back = read_bundle::<f32>(&p).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (x, y) in t0.iter().zip(t1.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_bundle_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.xmt");
        let tensors = vec![(
            "w".to_string(),
            ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[4, 4])),
        )];
        write_bundle(&p, &tensors).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 5]).unwrap();
        assert!(read_bundle::<f32>(&p).is_err());
    }
}
