//! Procedural backgrounds, optionally replaced by crops of user images.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::RgbGrid;

/// Muted color: a gray level with a small tint, so objects stand out.
fn color(rng: &mut impl Rng) -> [f64; 3] {
    let g: f64 = rng.random_range(0.15..0.85);
    [0, 1, 2].map(|_| (g + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|ch| a[ch] * (1.0 - t) + b[ch] * t)
}

/// Flat color, linear gradient, or bilinearly upsampled value noise.
pub fn procedural_background(height: usize, width: usize, rng: &mut impl Rng) -> RgbGrid {
    match rng.random_range(0..3) {
        0 => {
            let c = color(rng);
            RgbGrid::from_fn(height, width, |_, _| c)
        }
        1 => {
            let (a, b) = (color(rng), color(rng));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            let norm = (height.max(width)) as f64;
            RgbGrid::from_fn(height, width, |r, col| {
                let t = ((col as f64 * c + r as f64 * s) / norm + 1.0) / 2.0;
                mix(a, b, t.clamp(0.0, 1.0))
            })
        }
        _ => {
            let cells = rng.random_range(3..8usize);
            let lattice: Vec<[f64; 3]> = (0..(cells + 1) * (cells + 1)).map(|_| color(rng)).collect();
            let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
            RgbGrid::from_fn(height, width, |r, c| {
                let y = r as f64 / height as f64 * cells as f64;
                let x = c as f64 / width as f64 * cells as f64;
                let (i, j) = (y.floor() as usize, x.floor() as usize);
                let (fy, fx) = (y - i as f64, x - j as f64);
                let top = mix(at(i, j), at(i, j + 1), fx);
                let bottom = mix(at(i + 1, j), at(i + 1, j + 1), fx);
                mix(top, bottom, fy)
            })
        }
    }
}

/// Source of backgrounds: procedural, or random crops of images in a directory.
#[derive(Clone, Debug, Default)]
pub struct BackgroundSource {
    images: Vec<PathBuf>,
}

impl BackgroundSource {
    pub fn procedural() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        images.sort();
        if images.is_empty() {
            return Err(Error::Config(format!("no background images in {dir:?}")));
        }
        Ok(BackgroundSource { images })
    }

    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> Result<RgbGrid> {
        if self.images.is_empty() {
            return Ok(procedural_background(height, width, rng));
        }
        let path = &self.images[rng.random_range(0..self.images.len())];
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let (iw, ih) = (img.width() as usize, img.height() as usize);
        let scale = (height as f64 / ih as f64).max(width as f64 / iw as f64);
        let img = if scale > 1.0 {
            let nw = (iw as f64 * scale).ceil() as u32;
            let nh = (ih as f64 * scale).ceil() as u32;
            image::imageops::resize(&img, nw, nh, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let r0 = rng.random_range(0..=(img.height() as usize - height));
        let c0 = rng.random_range(0..=(img.width() as usize - width));
        Ok(RgbGrid::from_fn(height, width, |r, c| {
            let p = img.get_pixel((c0 + c) as u32, (r0 + r) as u32).0;
            p.map(|v| f64::from(v) / 255.0)
        }))
    }
}
