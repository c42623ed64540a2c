//! Binary PPM (P6) images from `(h*w) x 3` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::spatial::Grid;
use crate::tensor::{Real, Tensor};

fn to_byte<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB bytes, row major; values are clamped to `[0, 1]`.
pub fn to_rgb8<T: Real>(image: &Tensor<T>, grid: Grid) -> Result<Vec<u8>> {
    if image.shape() != [grid.positions(), 3] {
        return Err(Error::dims("to_rgb8", image.shape(), &[grid.positions(), 3]));
    }
    Ok(image.data().iter().map(|v| to_byte(*v)).collect())
}

pub fn encode<T: Real>(image: &Tensor<T>, grid: Grid) -> Result<Vec<u8>> {
    let pixels = to_rgb8(image, grid)?;
    let mut out = format!("P6\n{} {}\n255\n", grid.w, grid.h).into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write<T: Real>(path: impl AsRef<Path>, image: &Tensor<T>, grid: Grid) -> Result<()> {
    std::fs::write(path, encode(image, grid)?)?;
    Ok(())
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let bad = || Error::Config("malformed PPM header".into());
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let token = std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?;
        fields.push(token.parse().map_err(|_| bad())?);
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((fields, i + 1))
}

/// Parses a P6 image with maxval 255.
pub fn decode(bytes: &[u8]) -> Result<(Tensor<f64>, Grid)> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Config("not a P6 image".into()));
    }
    let (fields, offset) = header_fields(&bytes[2..], 3)?;
    let (w, h, max) = (fields[0], fields[1], fields[2]);
    if max != 255 {
        return Err(Error::Config(format!("unsupported maxval {max}")));
    }
    let raster = &bytes[2 + offset..];
    if raster.len() != w * h * 3 {
        return Err(Error::Config(format!("expected {} raster bytes, found {}", w * h * 3, raster.len())));
    }
    let data = raster.iter().map(|b| *b as f64 / 255.0).collect();
    Ok((Tensor::from_vec(&[w * h, 3], data)?, Grid::new(h, w)))
}

/// Tiles equally sized images row by row, `columns` per row, with a
/// one-pixel white gutter.
pub fn montage<T: Real>(images: &[&Tensor<T>], grid: Grid, columns: usize) -> Result<(Tensor<T>, Grid)> {
    if images.is_empty() || columns == 0 {
        return Err(Error::Config("montage needs images and columns".into()));
    }
    let rows = images.len().div_ceil(columns);
    let cols = columns.min(images.len());
    let out_grid = Grid::new(rows * (grid.h + 1) - 1, cols * (grid.w + 1) - 1);
    let mut out = Tensor::full(&[out_grid.positions(), 3], T::one());
    for (n, img) in images.iter().enumerate() {
        if img.shape() != [grid.positions(), 3] {
            return Err(Error::dims("montage", img.shape(), &[grid.positions(), 3]));
        }
        let (oy, ox) = ((n / columns) * (grid.h + 1), (n % columns) * (grid.w + 1));
        for y in 0..grid.h {
            for x in 0..grid.w {
                let dst = (oy + y) * out_grid.w + ox + x;
                for c in 0..3 {
                    out.set(dst, c, img.get(y * grid.w + x, c));
                }
            }
        }
    }
    Ok((out, out_grid))
}
