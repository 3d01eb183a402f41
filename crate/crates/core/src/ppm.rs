//! Binary PPM (P6, 8-bit) output. Pixel values in `[-1, 1]` map linearly to
//! `[0, 255]`; values outside are clamped.
//!
//! Reading inverts the map, except that levels 0 and 255 come back as
//! `∓(1 − 1/512)` rather than `∓1`: every decoded image stays inside the
//! invertible range and still re-encodes to the same bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::world::ToyImage;

/// How far the extreme levels are pulled inside `(-1, 1)` when reading.
pub const EDGE_INSET: f64 = 1.0 / 512.0;

pub fn gray_level(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes an `H×W×3` image. Other channel counts are rejected.
pub fn encode(image: &ToyImage) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Input {
            op: "ppm",
            detail: format!("P6 needs 3 channels, got {}", image.channels()),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| gray_level(v)));
    Ok(out)
}

/// Decodes a P6 file written by [`encode`] (no comments, maxval 255).
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |detail: &str| Error::Format {
        what: "ppm",
        detail: detail.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != w * h * 3 {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((w, h, body.to_vec()))
}

pub fn write(path: &Path, image: &ToyImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

/// Pixel value for a gray level; the inverse of [`gray_level`] up to the edge inset.
pub fn level_value(b: u8) -> f64 {
    (b as f64 / 127.5 - 1.0).clamp(-1.0 + EDGE_INSET, 1.0 - EDGE_INSET)
}

/// Reads a P6 file back into pixel values strictly inside `(-1, 1)`.
pub fn read(path: &Path) -> Result<ToyImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode(&bytes)?;
    let data = px.into_iter().map(level_value).collect();
    ToyImage::new(crate::tensor::Tensor::new(vec![h, w, 3], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(gray_level(-1.0), 0);
        assert_eq!(gray_level(1.0), 255);
        assert_eq!(gray_level(0.0), 128);
        assert_eq!(gray_level(7.0), 255);
        assert_eq!(gray_level(-3.0), 0);
    }

    #[test]
    fn header_and_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 9.0 - 1.0).collect();
        let img = ToyImage::new(Tensor::new(vec![2, 3, 3], data).unwrap()).unwrap();
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let (w, h, px) = decode(&bytes).unwrap();
        assert_eq!((w, h, px.len()), (3, 2, 18));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write(&path, &img).unwrap();
        let back = read(&path).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()) <= 0.5 / 127.5 + 1e-12);
    }

    #[test]
    fn every_level_survives_a_round_trip() {
        for b in 0..=255u8 {
            let v = level_value(b);
            assert!(v.abs() < 1.0);
            assert_eq!(gray_level(v), b);
        }
        assert_eq!(level_value(255), 1.0 - EDGE_INSET);
    }

    #[test]
    fn rejects_truncated() {
        assert!(decode(b"P6\n3 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n255\n\x00").is_err());
    }
}
