//! Dense float images in row-major HWC layout.
//!
//! Pixel `(row, col)` covers the continuous square `[col, col+1) x [row, row+1)`, so its
//! center sits at `(col + 0.5, row + 0.5)`. Every projection in the crate uses this
//! convention.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 8] = b"HYDRARAW";
const RAW_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.idx(row, col, ch);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Copies the sub-rectangle `rows x cols` (half-open ranges).
    pub fn crop(&self, row0: usize, row1: usize, col0: usize, col1: usize) -> Image {
        Image::from_fn(row1 - row0, col1 - col0, self.channels, |r, c, ch| {
            self.get(row0 + r, col0 + c, ch)
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One axis of a bilinear resampling: the two source taps and their weights for an
/// output coordinate. Uses half-pixel centers and edge clamping.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn taps(out_index: usize, out_len: usize, src_len: usize) -> Taps {
    let scale = src_len as f64 / out_len as f64;
    let s = ((out_index as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    let w1 = s - i0 as f64;
    Taps { i0, i1, w0: 1.0 - w1, w1 }
}

/// Bilinear resize (half-pixel centers, clamped borders). Equal sizes give an exact copy.
pub fn resize_bilinear(src: &Image, out_h: usize, out_w: usize) -> Image {
    let ty: Vec<Taps> = (0..out_h).map(|r| taps(r, out_h, src.height)).collect();
    let tx: Vec<Taps> = (0..out_w).map(|c| taps(c, out_w, src.width)).collect();
    Image::from_fn(out_h, out_w, src.channels, |r, c, ch| {
        let (y, x) = (ty[r], tx[c]);
        y.w0 * (x.w0 * src.get(y.i0, x.i0, ch) + x.w1 * src.get(y.i0, x.i1, ch))
            + y.w1 * (x.w0 * src.get(y.i1, x.i0, ch) + x.w1 * src.get(y.i1, x.i1, ch))
    })
}

/// Writes the exact float contents: magic, version, `height width channels` as u32 LE,
/// then little-endian f64 samples in HWC order.
pub fn write_raw(image: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + image.data.len() * 8);
    buf.extend_from_slice(RAW_MAGIC);
    for v in [RAW_VERSION, image.height as u32, image.width as u32, image.channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::SchemaMismatch(format!("{}: {m}", path.display()));
    if buf.len() < 24 || &buf[..8] != RAW_MAGIC {
        return Err(bad("not a raw image file"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != RAW_VERSION as usize {
        return Err(bad("unsupported raw version"));
    }
    let (height, width, channels) = (word(1), word(2), word(3));
    let n = height * width * channels;
    if buf.len() != 24 + 8 * n {
        return Err(bad("truncated raw image"));
    }
    let data = buf[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image { height, width, channels, data })
}

/// 8-bit RGB PNG (values clamped to [0, 1] and rounded).
pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::ShapeMismatch(format!("PNG export needs 3 channels, got {}", image.channels)));
    }
    let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer size");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::SchemaMismatch(format!("{}: {other}", path.display())),
    })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::SchemaMismatch(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { height: h as usize, width: w as usize, channels: 3, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_same_size_is_copy() {
        let img = Image::from_fn(5, 7, 3, |r, c, ch| (r * 31 + c * 7 + ch) as f64 * 0.01);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
    }

    #[test]
    fn resize_downscale_by_two_averages_pairs() {
        let img = Image::from_fn(2, 4, 1, |_, c, _| c as f64);
        let out = resize_bilinear(&img, 1, 2);
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((out.get(0, 1, 0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 4, 3, |r, c, ch| (r as f64 * 0.1 + c as f64 / 3.0 + ch as f64).sin());
        let p = dir.path().join("x.raw");
        write_raw(&img, &p).unwrap();
        assert_eq!(read_raw(&p).unwrap(), img);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(read_raw(&p), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn crop_extracts_block() {
        let img = Image::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        let cr = img.crop(1, 3, 2, 4);
        assert_eq!(cr.data, vec![6.0, 7.0, 10.0, 11.0]);
    }
}
