//! Small raster helpers shared by the pipeline stages.
//!
//! Images are `Array2<f64>` indexed `[row, col]` with values nominally in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Area-average resampling: every output cell is the mean of the input area it covers.
///
/// Handles non-integer ratios by weighting partially covered input cells.
pub fn area_resize(src: &Array2<f64>, out_hw: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let (oh, ow) = out_hw;
    if (sh, sw) == (oh, ow) {
        return src.clone();
    }
    let rows = axis_weights(sh, oh);
    let cols = axis_weights(sw, ow);
    let mut out = Array2::zeros((oh, ow));
    for (r, rw) in rows.iter().enumerate() {
        for (c, cw) in cols.iter().enumerate() {
            let mut acc = 0.0;
            let mut total = 0.0;
            for &(sr, wr) in rw {
                for &(sc, wc) in cw {
                    let w = wr * wc;
                    acc += w * src[[sr, sc]];
                    total += w;
                }
            }
            out[[r, c]] = acc / total;
        }
    }
    out
}

// For each output index, the (input index, overlap length) pairs it covers.
fn axis_weights(src_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src_len);
            (first..last)
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &Array2<f64>, out_hw: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let (oh, ow) = out_hw;
    if (sh, sw) == (oh, ow) {
        return src.clone();
    }
    let sample = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let sy = sh as f64 / oh as f64;
    let sx = sw as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let (r0, r1, fr) = sample((r as f64 + 0.5) * sy - 0.5, sh);
        let (c0, c1, fc) = sample((c as f64 + 0.5) * sx - 0.5, sw);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Maps values `>= level` to 1 and everything else to 0.
pub fn threshold(src: &Array2<f64>, level: f64) -> Array2<f64> {
    src.mapv(|v| if v >= level { 1.0 } else { 0.0 })
}

pub fn is_binary(src: &Array2<f64>) -> bool {
    src.iter().all(|&v| v == 0.0 || v == 1.0)
}

pub fn in_unit_range(src: &Array2<f64>) -> bool {
    src.iter().all(|&v| (0.0..=1.0).contains(&v))
}

/// Quantizes to 8-bit grayscale, clamping to `[0, 1]` first. NaN maps to 0.
pub fn to_gray8(src: &Array2<f64>) -> GrayImage {
    let (h, w) = src.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = src[[y as usize, x as usize]];
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Luma([(v * 255.0).round() as u8])
    })
}

pub fn from_gray8(img: &GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
    })
}

/// Encodes as an 8-bit grayscale PNG.
pub fn png_bytes(src: &Array2<f64>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_gray8(src).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Array2<f64>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(from_gray8(&img.to_luma8()))
}

pub fn read_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?;
    Ok(from_gray8(&img.to_luma8()))
}

/// Writes the PNG and returns the SHA-256 of the written bytes.
pub fn write_png(path: &Path, src: &Array2<f64>) -> Result<String> {
    let bytes = png_bytes(src)?;
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn check_same_dim(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("{what}: {a:?} vs {b:?}")))
    }
}
