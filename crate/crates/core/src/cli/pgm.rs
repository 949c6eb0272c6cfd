//! 8-bit binary PGM (P5) grids.

use std::path::Path;

use crate::error::{Result, SamiError};
use crate::numerics::Tensor;

const SEPARATOR: usize = 2;

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

fn tile_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(SamiError::Shape {
            op: "write_image_grid",
            detail: format!("tile {s:?}, expected [H, W] or [1, H, W]"),
        }),
    }
}

/// Encodes tiles row-major with 2-pixel separators at 255.
pub fn encode_grid(images: &[Tensor], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if images.is_empty() || rows * cols < images.len() {
        return Err(SamiError::InvalidArgument(format!(
            "{} images do not fit a {rows}x{cols} grid",
            images.len()
        )));
    }
    let (h, w) = tile_dims(&images[0])?;
    for t in images {
        if tile_dims(t)? != (h, w) {
            return Err(SamiError::Shape {
                op: "write_image_grid",
                detail: "tiles differ in size".into(),
            });
        }
    }
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut px = vec![255u8; width * height];
    for (k, t) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (h + SEPARATOR), (k % cols) * (w + SEPARATOR));
        for r in 0..h {
            for c in 0..w {
                px[(r0 + r) * width + c0 + c] = quantize(t.data()[r * w + c]);
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_image_grid(images: &[Tensor], rows: usize, cols: usize, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_grid(images, rows, cols)?)
}

/// Decodes a P5 image to `[H, W]` values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, field: &str, detail: String| SamiError::Format {
        offset: offset as u64,
        field: field.to_string(),
        detail,
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt(pos, "header", "truncated".into()));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    if fields[0].1 != "P5" {
        return Err(fmt(0, "magic", format!("'{}'", fields[0].1)));
    }
    let num = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| fmt(fields[i].0, name, format!("'{}'", fields[i].1)))
    };
    let (w, h, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(fmt(fields[3].0, "maxval", format!("{maxval} (only 8-bit supported)")));
    }
    if bytes.len() < pos + w * h {
        return Err(fmt(pos, "pixels", format!("need {} bytes, have {}", w * h, bytes.len().saturating_sub(pos))));
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::new(&[h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-0.1), 0);
        assert_eq!(quantize(1.3), 255);
    }

    #[test]
    fn single_tile_and_separators() {
        let img = Tensor::full(&[32, 32], 0.0);
        let b = encode_grid(std::slice::from_ref(&img), 1, 1).unwrap();
        let back = decode_pgm(&b).unwrap();
        assert_eq!(back.shape(), &[32, 32]);
        let g = encode_grid(&[img.clone(), img], 1, 2).unwrap();
        let back = decode_pgm(&g).unwrap();
        assert_eq!(back.shape(), &[32, 66]);
        assert_eq!(back.data()[32], 1.0);
        assert_eq!(back.data()[31], 0.0);
        assert!(encode_grid(&vec![Tensor::zeros(&[2, 2]); 3], 1, 2).is_err());
    }
}
