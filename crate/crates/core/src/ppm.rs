//! Binary PPM (P6) emission and loading. Zero-dependency and bit-exact,
//! which is what the reproducibility tests compare.

use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ppm: {0}")]
    Malformed(String),
}

/// Quantize a [0,1] float channel value to a byte.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write planar [3, h, w] float data as P6.
pub fn write_ppm(path: &Path, w: usize, h: usize, chw: &[f32]) -> Result<(), PpmError> {
    assert_eq!(chw.len(), 3 * w * h, "channel-planar size mismatch");
    let mut buf = Vec::with_capacity(3 * w * h + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", w, h).as_bytes());
    let plane = w * h;
    for i in 0..plane {
        buf.push(to_byte(chw[i]));
        buf.push(to_byte(chw[plane + i]));
        buf.push(to_byte(chw[2 * plane + i]));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a P6 file back into planar [3, h, w] floats in [0,1].
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>), PpmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, PpmError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::Malformed("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(PpmError::Malformed("not a P6 file".into()));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| PpmError::Malformed("bad width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| PpmError::Malformed("bad height".into()))?;
    let maxv: usize = token(&bytes)?.parse().map_err(|_| PpmError::Malformed("bad maxval".into()))?;
    if maxv != 255 {
        return Err(PpmError::Malformed(format!("unsupported maxval {}", maxv)));
    }
    pos += 1; // single whitespace after maxval
    let plane = w * h;
    if bytes.len() < pos + 3 * plane {
        return Err(PpmError::Malformed("truncated pixel data".into()));
    }
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        out[i] = bytes[pos + 3 * i] as f32 / 255.0;
        out[plane + i] = bytes[pos + 3 * i + 1] as f32 / 255.0;
        out[2 * plane + i] = bytes[pos + 3 * i + 2] as f32 / 255.0;
    }
    Ok((w, h, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| (i % 256) as f32 / 255.0).collect();
        write_ppm(&path, 4, 4, &data).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 4));
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
