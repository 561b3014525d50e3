//! Input images: binary PPM (P6) or tensor-container files.

use std::path::Path;

use davit_core::container;
use davit_core::{DavitError, Result, Tensor};

fn format_err(msg: impl Into<String>) -> DavitError {
    DavitError::Format(msg.into())
}

/// Parses a P6 image into `[1, 3, H, W]` with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PPM header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("bad PPM header"))?,
        );
    }
    if fields[0] != "P6" {
        return Err(format_err(format!(
            "unsupported image magic '{}' (binary PPM P6 only)",
            fields[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(format!("bad PPM header field '{s}'")))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err(
            "PPM dimensions and maxval must be positive (maxval <= 65535)",
        ));
    }
    pos += 1; // single whitespace byte before the raster
    let wide = maxval > 255;
    let need = w * h * 3 * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format_err("truncated PPM raster"))?;
    let sample = |i: usize| -> f32 {
        let v = if wide {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f32
        } else {
            raster[i] as f32
        };
        v / maxval as f32
    };
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = sample(p * 3 + c);
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Loads a batch `[N, C, H, W]` from a PPM or tensor-container file.
pub fn load_images(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(container::MAGIC) {
        let (t, used) = container::decode(&bytes)?;
        if used != bytes.len() {
            return Err(format_err("trailing bytes after tensor"));
        }
        let t = t.into_dtype::<f32>();
        match t.rank() {
            3 => t.reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]]),
            4 => Ok(t),
            _ => Err(DavitError::Shape(format!(
                "expected [C, H, W] or [N, C, H, W], got {:?}",
                t.shape()
            ))),
        }
    } else if bytes.starts_with(b"P") {
        decode_ppm(&bytes)
    } else {
        Err(format_err(format!(
            "{}: neither a PPM image nor a tensor file",
            path.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Encodes `[1, 3, H, W]` (or `[3, H, W]`) values in `[0, 1]` as an 8-bit P6 image.
    pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
        let s = img.shape();
        let (h, w) = match s {
            [1, 3, h, w] | [3, h, w] => (*h, *w),
            _ => {
                return Err(DavitError::Shape(format!(
                    "expected a 3-channel image, got {s:?}"
                )))
            }
        };
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        let d = img.data();
        for p in 0..h * w {
            for c in 0..3 {
                out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ok(out)
    }

    #[test]
    fn ppm_round_trip_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let again = encode_ppm(&t).unwrap();
        assert_eq!(decode_ppm(&again).unwrap(), t);
    }

    #[test]
    fn bad_images() {
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
    }
}
