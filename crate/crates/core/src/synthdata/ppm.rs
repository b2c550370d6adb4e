//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "PPM image",
        detail: detail.into(),
    }
}

/// Quantizes a `[3, H, W]` image in `[0, 1]` to interleaved RGB bytes.
pub fn to_bytes<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::contract(format!(
            "PPM needs a [3, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = d[(ch * h + y) * w + x].f64().clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok((h, w, bytes))
}

pub fn from_bytes<T: Real>(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() != 3 * h * w {
        return Err(bad("pixel payload has the wrong length"));
    }
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = T::c(px[ch] as f64 / 255.0);
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn encode(h: usize, w: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// Parses a P6 file into `(height, width, rgb bytes)`.
pub fn decode(file: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < file.len() && file[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < file.len() && file[pos] == b'#' {
            while pos < file.len() && file[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < file.len() && !file[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&file[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad(format!("magic {:?}, expected P6", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad(format!("maxval {max}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = &file[(pos + 1).min(file.len())..];
    if body.len() != 3 * w * h {
        return Err(bad("pixel payload has the wrong length"));
    }
    Ok((h, w, body.to_vec()))
}

pub fn write<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (h, w, bytes) = to_bytes(image)?;
    std::fs::write(path, encode(h, w, &bytes)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let file = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, bytes) = decode(&file)?;
    from_bytes(h, w, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_roundtrip() {
        let bytes: Vec<u8> = (0..3 * 4 * 2).map(|i| (i * 11) as u8).collect();
        let file = encode(4, 2, &bytes);
        assert_eq!(decode(&file).unwrap(), (4, 2, bytes.clone()));
        let img: Tensor<f32> = from_bytes(4, 2, &bytes).unwrap();
        assert_eq!(to_bytes(&img).unwrap().2, bytes);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0\0").is_err());
    }
}
