//! Row-major single- and three-channel float rasters.

use std::path::Path;

use crate::error::{Error, Result};

/// H×W grid of reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] += value;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// H×W×3 image, channels interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        RgbGrid {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        RgbGrid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, px: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Planar C×H×W copy, the layout the encoder consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * hw + p] = px[ch];
            }
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `image` with `alpha` in the A channel as an 8-bit RGBA PNG.
pub fn write_rgba_png(path: &Path, image: &RgbGrid, alpha: &Grid) -> Result<()> {
    if image.dims() != alpha.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs alpha {:?}",
            image.dims(),
            alpha.dims()
        )));
    }
    let mut buf = Vec::with_capacity(image.height * image.width * 4);
    for (px, &a) in image.data.chunks_exact(3).zip(&alpha.data) {
        buf.extend(px.iter().map(|&v| quantize(v)));
        buf.push(quantize(a));
    }
    let img = image::RgbaImage::from_raw(image.width as u32, image.height as u32, buf)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads an RGBA (or RGB) raster back as an [0,1] image plus alpha.
pub fn read_rgba_png(path: &Path) -> Result<(RgbGrid, Grid)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut rgb = RgbGrid::zeros(h, w);
    let mut alpha = Grid::zeros(h, w);
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            rgb.data[i * 3 + ch] = f64::from(px.0[ch]) / 255.0;
        }
        alpha.data[i] = f64::from(px.0[3]) / 255.0;
    }
    Ok((rgb, alpha))
}
