//! Single-channel images, binary masks, rectangles and Netpbm (PGM/PPM) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates, `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }
}

/// Gray image stored with its native integer depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    maxval: u16,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, maxval: u16) -> Self {
        GrayImage {
            width,
            height,
            maxval: maxval.max(1),
            pixels: vec![0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if maxval == 0 {
            return Err(Error::Format("maxval must be positive".into()));
        }
        if let Some(p) = pixels.iter().find(|&&p| p > maxval) {
            return Err(Error::Format(format!("pixel value {p} exceeds maxval {maxval}")));
        }
        Ok(GrayImage {
            width,
            height,
            maxval,
            pixels,
        })
    }

    /// Quantizes intensities in `[0, 1]` (clamped) to the given depth.
    pub fn from_unit(width: usize, height: usize, maxval: u16, values: &[f64]) -> Result<Self> {
        let scale = maxval as f64;
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * scale).round() as u16)
            .collect();
        Self::from_pixels(width, height, maxval, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn maxval(&self) -> u16 {
        self.maxval
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn raw(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn set_raw(&mut self, x: usize, y: usize, value: u16) {
        self.pixels[y * self.width + x] = value.min(self.maxval);
    }

    /// Intensity normalized to `[0, 1]`.
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.raw(x, y) as f64 / self.maxval as f64
    }

    /// Copies a square patch into a row-major buffer of unit intensities.
    pub fn patch(&self, rect: &Rect) -> Vec<f64> {
        let scale = 1.0 / self.maxval as f64;
        let mut out = Vec::with_capacity(rect.area());
        for y in rect.y..rect.bottom() {
            let row = &self.pixels[y * self.width + rect.x..y * self.width + rect.right()];
            out.extend(row.iter().map(|&p| p as f64 * scale));
        }
        out
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pgm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            for &p in &self.pixels {
                out.extend_from_slice(&p.to_be_bytes());
            }
        }
        out
    }
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(format!("expected binary PGM magic P5, found {magic:?}"));
    }
    let number = |pos: &mut usize, what: &str| -> std::result::Result<usize, String> {
        next_token(pos)?
            .parse::<usize>()
            .map_err(|_| format!("bad {what} in header"))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(format!("raster truncated: expected {need} bytes, found {}", raster.len()));
    }
    let pixels: Vec<u16> = if bpp == 1 {
        raster[..need].iter().map(|&b| b as u16).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    GrayImage::from_pixels(width, height, maxval as u16, pixels).map_err(|e| e.to_string())
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_in(&self, rect: &Rect) -> usize {
        (rect.y..rect.bottom())
            .map(|y| {
                self.bits[y * self.width + rect.x..y * self.width + rect.right()]
                    .iter()
                    .filter(|&&b| b)
                    .count()
            })
            .sum()
    }

    /// Nonzero pixels are foreground.
    pub fn from_image(image: &GrayImage) -> Self {
        BinaryMask {
            width: image.width(),
            height: image.height(),
            bits: image.pixels().iter().map(|&p| p != 0).collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        let pixels = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_pixels(self.width, self.height, 255, pixels).expect("mask dimensions")
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        GrayImage::read_pgm(path).map(|img| Self::from_image(&img))
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().write_pgm(path)
    }
}

/// 8-bit RGB raster written as binary PPM (P6).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    /// Gray-to-RGB replication, rescaled to 8 bits.
    pub fn from_gray(image: &GrayImage) -> Self {
        let scale = 255.0 / image.maxval() as f64;
        let data = image
            .pixels()
            .iter()
            .map(|&p| {
                let v = (p as f64 * scale).round() as u8;
                [v, v, v]
            })
            .collect();
        RgbImage {
            width: image.width(),
            height: image.height(),
            data,
        }
    }

    /// Sets one channel to full intensity along the border of `rect`.
    pub fn outline(&mut self, rect: &Rect, channel: usize, thickness: usize) {
        let (x1, y1) = (rect.right().min(self.width), rect.bottom().min(self.height));
        for y in rect.y..y1 {
            for x in rect.x..x1 {
                let edge = x < rect.x + thickness
                    || y < rect.y + thickness
                    || x + thickness >= x1
                    || y + thickness >= y1;
                if edge {
                    self.data[y * self.width + x][channel] = 255;
                }
            }
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.data {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_8_and_16_bit() {
        for maxval in [255u16, 65535] {
            let pixels: Vec<u16> = (0..12).map(|i| (i * 1000) as u16 % (maxval)).collect();
            let img = GrayImage::from_pixels(4, 3, maxval, pixels).unwrap();
            let back = decode_pgm(&img.encode_pgm()).unwrap();
            assert_eq!(img, back);
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[7, 9]);
    }

    #[test]
    fn pgm_truncated_raster_is_rejected() {
        let bytes = b"P5\n2 2\n255\n\x01\x02".to_vec();
        assert!(decode_pgm(&bytes).unwrap_err().contains("truncated"));
    }

    #[test]
    fn rect_intersection() {
        let a = Rect::new(0, 0, 10, 10);
        assert_eq!(a.intersection_area(&Rect::new(5, 5, 10, 10)), 25);
        assert_eq!(a.intersection_area(&Rect::new(10, 0, 3, 3)), 0);
    }

    #[test]
    fn outline_touches_only_border() {
        let img = GrayImage::new(8, 8, 255);
        let mut rgb = RgbImage::from_gray(&img);
        rgb.outline(&Rect::new(2, 2, 4, 4), 2, 1);
        assert_eq!(rgb.data[2 * 8 + 2], [0, 0, 255]);
        assert_eq!(rgb.data[3 * 8 + 3], [0, 0, 0]);
        assert_eq!(rgb.data[5 * 8 + 5], [0, 0, 255]);
    }
}
