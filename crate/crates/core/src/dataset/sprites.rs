//! Procedural object sprites: the category picks the silhouette family, the
//! object id picks size, colors and texture.

use rand::Rng;

use crate::blur_synth::Sprite;
use crate::raster::{Grid, RgbGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Rectangle,
    Triangle,
    Ellipse,
    Diamond,
    Hexagon,
    Cross,
    Semicircle,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Disk,
        ShapeFamily::Rectangle,
        ShapeFamily::Triangle,
        ShapeFamily::Ellipse,
        ShapeFamily::Diamond,
        ShapeFamily::Hexagon,
        ShapeFamily::Cross,
        ShapeFamily::Semicircle,
    ];

    pub fn for_category(category_id: u32) -> Self {
        Self::ALL[category_id as usize % Self::ALL.len()]
    }

    /// Whether `(u, v)` in `[-1, 1]²` lies inside the unit-size shape.
    /// `aspect` stretches shapes that have a free aspect ratio.
    fn contains(self, u: f64, v: f64, aspect: f64) -> bool {
        match self {
            ShapeFamily::Disk => u * u + v * v <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= 1.0 && v.abs() <= aspect,
            ShapeFamily::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            ShapeFamily::Ellipse => u * u + (v / aspect).powi(2) <= 1.0,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Hexagon => {
                let (x, y) = (u.abs(), v.abs());
                y <= 0.866 && 0.866 * x + 0.5 * y <= 0.866
            }
            ShapeFamily::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.45) || (u.abs() <= 0.45 && v.abs() <= 1.0)
            }
            ShapeFamily::Semicircle => v >= -0.2 && u * u + (v + 0.2).powi(2) <= 1.2,
        }
    }
}

/// Surface pattern painted inside the silhouette.
#[derive(Clone, Copy, Debug)]
enum Pattern {
    Stripes { freq: f64, angle: f64 },
    Checker { cells: f64 },
    Radial { freq: f64 },
    Split { angle: f64 },
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    // Keep objects away from pure black so the mask boundary stays visible.
    [
        rng.random_range(0.1..1.0),
        rng.random_range(0.1..1.0),
        rng.random_range(0.1..1.0),
    ]
}

/// Two base colors shared by a category; each object perturbs them by up to
/// `jitter` per channel. A jitter of 1 or more makes colors independent of
/// the category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub base: [[f64; 3]; 2],
    pub jitter: f64,
}

impl Palette {
    pub fn random(jitter: f64, rng: &mut impl Rng) -> Self {
        Palette {
            base: [random_color(rng), random_color(rng)],
            jitter,
        }
    }

    fn object_color(&self, which: usize, rng: &mut impl Rng) -> [f64; 3] {
        if self.jitter >= 1.0 {
            return random_color(rng);
        }
        let j = self.jitter;
        self.base[which].map(|v| (v + rng.random_range(-j..=j)).clamp(0.1, 1.0))
    }
}

/// Size range (inclusive) of the square sprite canvas in pixels.
#[derive(Clone, Copy, Debug)]
pub struct SpriteSize {
    pub min: usize,
    pub max: usize,
}

pub fn make_sprite(category_id: u32, size: SpriteSize, palette: &Palette, rng: &mut impl Rng) -> Sprite {
    let family = ShapeFamily::for_category(category_id);
    // Categories sharing a family differ by aspect and rotation.
    let variant = (category_id as usize / ShapeFamily::ALL.len()) as f64;
    let aspect = 0.55 + 0.15 * (variant % 3.0);
    let rotation = 0.4 * variant;

    let extent = rng.random_range(size.min..=size.max);
    let c1 = palette.object_color(0, rng);
    let c2 = palette.object_color(1, rng);
    let pattern = match rng.random_range(0..4) {
        0 => Pattern::Stripes {
            freq: rng.random_range(1.5..4.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        1 => Pattern::Checker {
            cells: rng.random_range(2.0..4.0),
        },
        2 => Pattern::Radial {
            freq: rng.random_range(1.0..3.0),
        },
        _ => Pattern::Split {
            angle: rng.random_range(0.0..std::f64::consts::TAU),
        },
    };
    let phase = rng.random_range(0.0..1.0);

    let half = extent as f64 / 2.0;
    let (sin, cos) = rotation.sin_cos();
    const SS: usize = 4;
    let mut mask = Grid::zeros(extent, extent);
    let mut rgb = RgbGrid::zeros(extent, extent);
    for r in 0..extent {
        for c in 0..extent {
            let mut hits = 0;
            for sr in 0..SS {
                for sc in 0..SS {
                    let y = (r as f64 + (sr as f64 + 0.5) / SS as f64 - half) / half;
                    let x = (c as f64 + (sc as f64 + 0.5) / SS as f64 - half) / half;
                    let (u, v) = (cos * x + sin * y, -sin * x + cos * y);
                    hits += usize::from(family.contains(u, v, aspect));
                }
            }
            let m = hits as f64 / (SS * SS) as f64;
            if m == 0.0 {
                continue;
            }
            mask.set(r, c, m);
            let y = (r as f64 + 0.5 - half) / half;
            let x = (c as f64 + 0.5 - half) / half;
            let t = match pattern {
                Pattern::Stripes { freq, angle } => {
                    let s = x * angle.cos() + y * angle.sin();
                    (((s * freq + phase) * std::f64::consts::PI).sin() + 1.0) / 2.0
                }
                Pattern::Checker { cells } => {
                    let a = ((x + 1.0) * cells / 2.0 + phase).floor() as i64;
                    let b = ((y + 1.0) * cells / 2.0).floor() as i64;
                    ((a + b).rem_euclid(2)) as f64
                }
                Pattern::Radial { freq } => {
                    let d = x.hypot(y);
                    (((d * freq + phase) * std::f64::consts::TAU).cos() + 1.0) / 2.0
                }
                Pattern::Split { angle } => {
                    f64::from(u8::from(x * angle.cos() + y * angle.sin() > 0.0))
                }
            };
            let px = [0, 1, 2].map(|ch| c1[ch] * (1.0 - t) + c2[ch] * t);
            rgb.set(r, c, px);
        }
    }
    Sprite::new(rgb, mask).expect("procedural sprite is in range and non-empty")
}
