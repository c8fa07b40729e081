//! RGB images with `f32` samples in `[0, 1]`, stored row-major HWC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                what: "image buffer".into(),
                expected: format!("{}", width * height * 3),
                actual: format!("{}", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w x h` region at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Param(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Self::zeros(w, h);
        for yy in 0..h {
            let src = ((y + yy) * self.width + x) * 3;
            out.data[yy * w * 3..(yy + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::zeros(width, height);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..3 {
                    let top = lerp(self.get(x0, y0, c), self.get(x1, y0, c), tx);
                    let bot = lerp(self.get(x0, y1, c), self.get(x1, y1, c), tx);
                    out.set(x, y, c, lerp(top, bot, ty));
                }
            }
        }
        out
    }

    /// Bilinear sample with clamp-to-edge addressing.
    pub fn sample_bilinear(&self, fx: f32, fy: f32, c: usize) -> f32 {
        let fx = fx.clamp(0.0, (self.width - 1) as f32);
        let fy = fy.clamp(0.0, (self.height - 1) as f32);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
        let top = lerp(self.get(x0, y0, c), self.get(x1, y0, c), tx);
        let bot = lerp(self.get(x0, y1, c), self.get(x1, y1, c), tx);
        lerp(top, bot, ty)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Quantizes to 8 bits, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Axis-aligned placement box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    /// Checks positivity, canvas containment and latent-grid alignment.
    pub fn validate(&self, width: usize, height: usize, factor: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Param(format!("bbox {self} has zero extent")));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Param(format!(
                "bbox {self} exceeds {width}x{height} canvas"
            )));
        }
        if [self.x, self.y, self.w, self.h].iter().any(|v| v % factor != 0) {
            return Err(Error::Param(format!(
                "bbox {self} is not aligned to the {factor}-pixel latent grid"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Binary mask over the `(width/factor) x (height/factor)` latent grid.
    pub fn to_latent_mask(&self, width: usize, height: usize, factor: usize) -> Vec<u8> {
        let (lw, lh) = (width / factor, height / factor);
        let mut m = vec![0u8; lw * lh];
        for cy in 0..lh {
            for cx in 0..lw {
                let (px, py) = (cx * factor, cy * factor);
                let overlaps = px < self.x + self.w
                    && px + factor > self.x
                    && py < self.y + self.h
                    && py + factor > self.y;
                if overlaps {
                    m[cy * lw + cx] = 1;
                }
            }
        }
        m
    }

    /// Inverse of [`to_latent_mask`](Self::to_latent_mask) for a rectangular mask.
    pub fn from_latent_mask(mask: &[u8], latent_w: usize, factor: usize) -> Option<Self> {
        let cells: Vec<(usize, usize)> = mask
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i % latent_w, i / latent_w))
            .collect();
        let x0 = cells.iter().map(|c| c.0).min()?;
        let x1 = cells.iter().map(|c| c.0).max()?;
        let y0 = cells.iter().map(|c| c.1).min()?;
        let y1 = cells.iter().map(|c| c.1).max()?;
        if cells.len() != (x1 - x0 + 1) * (y1 - y0 + 1) {
            return None;
        }
        Some(Self {
            x: x0 * factor,
            y: y0 * factor,
            w: (x1 - x0 + 1) * factor,
            h: (y1 - y0 + 1) * factor,
        })
    }

    /// Parses `"x,y,w,h"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Param(format!("bbox {s:?}: {e}")))?;
        match parts[..] {
            [x, y, w, h] => Ok(Self { x, y, w, h }),
            _ => Err(Error::Param(format!("bbox {s:?}: expected 4 integers"))),
        }
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

/// Background with the box interior erased to zero.
pub fn erase_box(img: &Image, bbox: &BoundingBox) -> Image {
    let mut out = img.clone();
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            out.set_pixel(x, y, [0.0; 3]);
        }
    }
    out
}
