//! 64×64 grayscale camera frames.
//!
//! Frames are stored quantized to 8 bits, which is what the camera and the
//! on-disk PGM files carry. Model code reads them as reals in `[0, 1]`.

use std::io::Cursor;

use image::{GrayImage, ImageFormat};
use thiserror::Error;

pub const FRAME_SIZE: usize = 64;
pub const FRAME_PIXELS: usize = FRAME_SIZE * FRAME_SIZE;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame must be {FRAME_SIZE}x{FRAME_SIZE}, got {width}x{height}")]
    WrongSize { width: u32, height: u32 },
    #[error("expected {FRAME_PIXELS} pixels, got {0}")]
    WrongLength(usize),
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("malformed PGM: {0}")]
    Pgm(String),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mean = self.pixels.iter().map(|&p| p as u64).sum::<u64>() as f64 / FRAME_PIXELS as f64;
        write!(f, "Frame(mean={mean:.1})")
    }
}

impl Frame {
    pub fn from_bytes(pixels: Vec<u8>) -> Result<Self, FrameError> {
        if pixels.len() != FRAME_PIXELS {
            return Err(FrameError::WrongLength(pixels.len()));
        }
        Ok(Frame { pixels })
    }

    /// Quantizes reals in `[0, 1]` to 8 bits.
    pub fn from_reals(values: &[f64]) -> Result<Self, FrameError> {
        if values.len() != FRAME_PIXELS {
            return Err(FrameError::WrongLength(values.len()));
        }
        let mut pixels = Vec::with_capacity(FRAME_PIXELS);
        for &v in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(FrameError::OutOfRange(v));
            }
            pixels.push((v * 255.0).round() as u8);
        }
        Ok(Frame { pixels })
    }

    pub fn constant(value: u8) -> Self {
        Frame {
            pixels: vec![value; FRAME_PIXELS],
        }
    }

    pub fn white() -> Self {
        Frame::constant(255)
    }

    pub fn black() -> Self {
        Frame::constant(0)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        self.pixels[i] as f64 / 255.0
    }

    /// Appends the pixels as reals in `[0, 1]`.
    pub fn extend_reals(&self, out: &mut Vec<f64>) {
        out.extend(self.pixels.iter().map(|&p| p as f64 / 255.0));
    }

    pub fn to_reals(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FRAME_PIXELS);
        self.extend_reals(&mut v);
        v
    }

    /// Mean absolute difference in `[0, 1]` units over an optional pixel box
    /// `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub fn mean_abs_diff(&self, other: &Frame, region: Option<(usize, usize, usize, usize)>) -> f64 {
        let (x0, y0, x1, y1) = region.unwrap_or((0, 0, FRAME_SIZE, FRAME_SIZE));
        let mut sum = 0u64;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * FRAME_SIZE + x;
                sum += (self.pixels[i] as i32 - other.pixels[i] as i32).unsigned_abs() as u64;
            }
        }
        sum as f64 / (255.0 * ((x1 - x0) * (y1 - y0)) as f64)
    }

    /// Binary (P5) PGM encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{FRAME_SIZE} {FRAME_SIZE}\n255\n").into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(data: &[u8]) -> Result<Self, FrameError> {
        let img = image::load(Cursor::new(data), ImageFormat::Pnm)
            .map_err(|e| FrameError::Pgm(e.to_string()))?;
        let gray: GrayImage = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => return Err(FrameError::Pgm(format!("not 8-bit grayscale: {:?}", other.color()))),
        };
        if gray.width() as usize != FRAME_SIZE || gray.height() as usize != FRAME_SIZE {
            return Err(FrameError::WrongSize {
                width: gray.width(),
                height: gray.height(),
            });
        }
        Frame::from_bytes(gray.into_raw())
    }
}
