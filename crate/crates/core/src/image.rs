//! Single-channel float images and binary PGM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Size;
use crate::tensor::Tensor;

/// Row-major grayscale image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: Size,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(size: Size, data: Vec<f64>) -> Result<Self> {
        if data.len() != size.area() {
            return Err(Error::shape("image", format!("{} values for {}x{}", data.len(), size.height, size.width)));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: Size, value: f64) -> Self {
        Self { size, data: vec![value; size.area()] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size.width + x]
    }

    /// Bilinear sample at pixel-center coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (w, h) = (self.size.width, self.size.height);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// 8-bit quantization as stored in PGM files.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(size: Size, bytes: &[u8]) -> Result<Self> {
        Image::new(size, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Stacks equally sized images into an N×1×H×W tensor.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let size = images.first().map(|i| i.size).unwrap_or(Size::square(0));
        let mut data = Vec::with_capacity(images.len() * size.area());
        for im in images {
            if im.size != size {
                return Err(Error::shape("batch", format!("{:?} vs {:?}", im.size, size)));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(vec![images.len(), 1, size.height, size.width], data)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.size.width, self.size.height).into_bytes();
        out.extend(self.quantized());
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|detail| Error::Format { what: "PGM image", path: path.to_path_buf(), detail })
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary (P5) PGM".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("maxval {maxval}; only 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(format!("raster has {} of {n} bytes", bytes.len().saturating_sub(start)));
    }
    Image::from_bytes(Size::new(height, width), &bytes[start..start + n]).map_err(|e| e.to_string())
}
