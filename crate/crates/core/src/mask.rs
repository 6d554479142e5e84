//! Soft and binary masks plus PNG encoding.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predicted mask with values in `[0, 1]`, row-major `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("soft mask", height * width, values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("soft mask values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self::new(h, w, t.data().to_vec())
    }

    /// 8-bit grayscale PNG, value `round(255 * m)`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        write_gray(path, self.width, self.height, png::BitDepth::Eight, &bytes)
    }
}

/// Exactly binary `H x W` mask; 1 marks the sounding object.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("binary mask", height * width, values.len()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Config("binary mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn fg_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.values.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// 1-bit PNG, 0 = background, 1 (white) = foreground.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        write_gray(path, self.width, self.height, png::BitDepth::One, &packed)
    }

    /// Reads a grayscale or color PNG; any non-zero pixel is foreground.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = read_png(path)?;
        let values = img
            .pixels
            .chunks(img.channels)
            .map(|px| u8::from(px.iter().take(3).any(|&v| v > 0)))
            .collect();
        Self::new(img.height, img.width, values)
    }
}

pub(crate) struct DecodedPng {
    pub width: usize,
    pub height: usize,
    /// 8-bit samples, `channels` per pixel.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub(crate) fn read_png(path: &Path) -> Result<DecodedPng> {
    let img_err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| img_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(img_err("unexpanded palette image".into())),
    };
    let mut pixels = buf;
    if info.bit_depth == png::BitDepth::Eight && channels <= 2 {
        // Low bit depths are expanded to 8 bits with their original scale;
        // rescale 1-bit masks so that white reads as 255.
        let max = pixels.iter().copied().max().unwrap_or(0);
        if max == 1 {
            pixels.iter_mut().for_each(|p| *p *= 255);
        }
    }
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels,
    })
}

fn write_gray(path: &Path, w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    write_png_raw(path, w, h, png::ColorType::Grayscale, depth, data)
}

pub(crate) fn write_png_raw(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(5, 11, |y, x| (x * 3 + y) % 4 == 0);
        let path = dir.path().join("m.png");
        m.write_png(&path).unwrap();
        assert_eq!(BinaryMask::read_png(&path).unwrap(), m);
    }

    #[test]
    fn rejects_non_binary_values() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(SoftMask::new(1, 2, vec![0.5, 1.5]).is_err());
    }
}
