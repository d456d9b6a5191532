//! CSRF binary feature-map files.
//!
//! Layout (little-endian): magic `b"CSRF"`, `u32` version (= 1), `u32` C, `u32` H,
//! `u32` W, then `C*H*W` `f32` values in channel-major order.

use std::fs;
use std::path::Path;

use crate::error::{CsrError, Result};
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 4] = b"CSRF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

fn format_err(path: &Path, message: impl Into<String>) -> CsrError {
    CsrError::Format { path: path.to_path_buf(), message: message.into() }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    Ok(FeatureHeader { channels: word(8), height: word(12), width: word(16) })
}

/// Reads only the header, for cheap manifest validation.
pub fn read_header(path: impl AsRef<Path>) -> Result<FeatureHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = [0u8; HEADER_LEN];
    let mut file = fs::File::open(path).map_err(|e| CsrError::io(path, e))?;
    let mut read = 0;
    while read < HEADER_LEN {
        match file.read(&mut buf[read..]) {
            Ok(0) => break,
            Ok(n) => read += n,
            Err(e) => return Err(CsrError::io(path, e)),
        }
    }
    parse_header(path, &buf[..read])
}

pub fn decode_feature_map(path: &Path, bytes: &[u8]) -> Result<FeatureMap> {
    let header = parse_header(path, bytes)?;
    let (c, h, w) = (header.channels as usize, header.height as usize, header.width as usize);
    let count = c * h * w;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 4 {
        return Err(format_err(path, format!("truncated payload: {} bytes, expected {}", payload.len(), count * 4)));
    }
    if payload.len() > count * 4 {
        return Err(format_err(path, format!("{} trailing bytes after payload", payload.len() - count * 4)));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(path, format!("non-finite value at index {i}")));
        }
        data.push(v as f64);
    }
    FeatureMap::new(c, h, w, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CsrError::io(path, e))?;
    decode_feature_map(path, &bytes)
}

/// Encodes with values narrowed to `f32`.
pub fn encode_feature_map(f: &FeatureMap) -> Vec<u8> {
    let (c, h, w) = f.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + f.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for word in [VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_feature_map(path: impl AsRef<Path>, f: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_map(f)).map_err(|e| CsrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(magic: &[u8; 4], version: u32, dims: [u32; 3], values: &[f32]) -> Vec<u8> {
        let mut b = magic.to_vec();
        b.extend_from_slice(&version.to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn loads_channel_major_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csrf");
        fs::write(&path, fixture(MAGIC, 1, [2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let f = load_feature_map(&path).unwrap();
        assert_eq!(f.dims(), (2, 1, 2));
        assert_eq!(f.value(0, 0, 0), 1.0);
        assert_eq!(f.value(0, 0, 1), 2.0);
        assert_eq!(f.value(1, 0, 0), 3.0);
        assert_eq!(f.value(1, 0, 1), 4.0);
        assert_eq!(f.patch(0, 1), vec![2.0, 4.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = fixture(b"XXXX", 1, [1, 1, 1], &[1.0]);
        let err = decode_feature_map(Path::new("x"), &bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_unsupported_version() {
        let bytes = fixture(MAGIC, 2, [1, 1, 1], &[1.0]);
        let err = decode_feature_map(Path::new("x"), &bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = fixture(MAGIC, 1, [2, 2, 2], &[1.0; 7]);
        let err = decode_feature_map(Path::new("x"), &bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let err = decode_feature_map(Path::new("x"), &bytes[..10]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_non_finite() {
        let bytes = fixture(MAGIC, 1, [1, 1, 2], &[1.0, f32::INFINITY]);
        let err = decode_feature_map(Path::new("x"), &bytes).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csrf");
        fs::write(&path, fixture(MAGIC, 1, [3, 4, 5], &[0.0; 60])).unwrap();
        let h = read_header(&path).unwrap();
        assert_eq!((h.channels, h.height, h.width), (3, 4, 5));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(-1e6f32..1e6, 12)) {
            let f = FeatureMap::new(3, 2, 2, values.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode_feature_map(Path::new("mem"), &encode_feature_map(&f)).unwrap();
            for (a, b) in back.data().iter().zip(&values) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
        }
    }
}
