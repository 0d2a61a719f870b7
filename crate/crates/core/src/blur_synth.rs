//! Image formation for a linearly moving object, and the blur measurements
//! derived from it.
//!
//! An image of an object moving during the exposure is modelled as
//! `I = P*O + (1 - P*M)·B`, where `P` is the point spread function of the
//! trajectory, `O` the object's (premultiplied) appearance, `M` its mask and
//! `B` the background. The visibility map `α = P*M` drives every annotation:
//! blur severity, blur level and the ground-truth box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, RgbGrid};

/// Subpixel position on the canvas. Cell `(r, c)` has its center at integer
/// coordinates `(r, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Point { row, col }
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.row + (other.row - self.row) * t,
            self.col + (other.col - self.col) * t,
        )
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

/// Normalized kernel on the canvas: `weights(r, c)` is the fraction of the
/// exposure during which the object's anchor sits at cell `(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSpreadFunction {
    weights: Grid,
    support: Vec<(usize, usize, f64)>,
}

impl PointSpreadFunction {
    fn from_weights(weights: Grid) -> Self {
        let mut support = Vec::new();
        for r in 0..weights.height {
            for c in 0..weights.width {
                let w = weights.get(r, c);
                if w > 0.0 {
                    support.push((r, c, w));
                }
            }
        }
        PointSpreadFunction { weights, support }
    }

    /// Unit impulse at an integer cell.
    pub fn delta(canvas: (usize, usize), row: usize, col: usize) -> Result<Self> {
        let (h, w) = canvas;
        if row >= h || col >= w {
            return Err(Error::OutOfBounds {
                row: row as f64,
                col: col as f64,
                height: h,
                width: w,
            });
        }
        let mut weights = Grid::zeros(h, w);
        weights.set(row, col, 1.0);
        Ok(Self::from_weights(weights))
    }

    pub fn weights(&self) -> &Grid {
        &self.weights
    }

    /// Nonzero cells as `(row, col, weight)`, row-major.
    pub fn support(&self) -> &[(usize, usize, f64)] {
        &self.support
    }

    pub fn canvas(&self) -> (usize, usize) {
        self.weights.dims()
    }
}

fn check_in_canvas(p: Point, canvas: (usize, usize)) -> Result<()> {
    let (h, w) = canvas;
    let inside = p.row.is_finite()
        && p.col.is_finite()
        && p.row >= 0.0
        && p.col >= 0.0
        && p.row <= (h as f64 - 1.0)
        && p.col <= (w as f64 - 1.0);
    if inside {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            row: p.row,
            col: p.col,
            height: h,
            width: w,
        })
    }
}

/// Adds `mass` at subpixel `p`, split bilinearly over the four surrounding cells.
fn splat(grid: &mut Grid, p: Point, mass: f64) {
    let r0 = p.row.floor();
    let c0 = p.col.floor();
    let fr = p.row - r0;
    let fc = p.col - c0;
    let (r0, c0) = (r0 as usize, c0 as usize);
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let w = wr * wc;
            if w > 0.0 {
                grid.add(r0 + dr, c0 + dc, mass * w);
            }
        }
    }
}

/// Rasterizes the straight segment `start → end` into a PSF by depositing
/// `1/n_samples` at the midpoints of `n_samples` equal sub-intervals.
pub fn rasterize_linear_psf(
    start: Point,
    end: Point,
    canvas: (usize, usize),
    n_samples: usize,
) -> Result<PointSpreadFunction> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    check_in_canvas(start, canvas)?;
    check_in_canvas(end, canvas)?;
    let mut weights = Grid::zeros(canvas.0, canvas.1);
    let mass = 1.0 / n_samples as f64;
    for i in 0..n_samples {
        let t = (i as f64 + 0.5) / n_samples as f64;
        splat(&mut weights, start.lerp(end, t), mass);
    }
    // Splat weights of one sample sum to 1 up to rounding; renormalize so the
    // kernel is exactly a convex combination.
    let total = weights.sum();
    weights.data.iter_mut().for_each(|w| *w /= total);
    Ok(PointSpreadFunction::from_weights(weights))
}

/// Sharp object appearance `O` with its mask `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub rgb: RgbGrid,
    pub mask: Grid,
}

impl Sprite {
    pub fn new(rgb: RgbGrid, mask: Grid) -> Result<Self> {
        if rgb.dims() != mask.dims() {
            return Err(Error::ShapeMismatch(format!(
                "sprite rgb {:?} vs mask {:?}",
                rgb.dims(),
                mask.dims()
            )));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !rgb.data.iter().all(in_unit) || !mask.data.iter().all(in_unit) {
            return Err(Error::Domain("sprite values must lie in [0,1]".into()));
        }
        if !mask.data.iter().any(|&m| m > 0.0) {
            return Err(Error::Domain("sprite mask is empty".into()));
        }
        Ok(Sprite { rgb, mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// Integer center cell, the default anchor.
    pub fn center(&self) -> (usize, usize) {
        let (h, w) = self.dims();
        (h / 2, w / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult {
    pub image: RgbGrid,
    pub alpha: Grid,
    pub background: RgbGrid,
}

/// Renders `P*O + (1 - P*M)·B`.
///
/// `anchor` is the sprite cell that follows the trajectory: a PSF weight at
/// canvas cell `(r, c)` places sprite cell `anchor` on `(r, c)`. Sprite pixels
/// that land outside the frame are dropped.
pub fn composite(
    psf: &PointSpreadFunction,
    sprite: &Sprite,
    anchor: (usize, usize),
    background: &RgbGrid,
) -> Result<CompositeResult> {
    let (h, w) = background.dims();
    if psf.canvas() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "psf canvas {:?} vs background {:?}",
            psf.canvas(),
            (h, w)
        )));
    }
    let (sh, sw) = sprite.dims();
    if anchor.0 >= sh || anchor.1 >= sw {
        return Err(Error::ShapeMismatch(format!(
            "anchor {anchor:?} outside sprite {:?}",
            (sh, sw)
        )));
    }
    let mut alpha = Grid::zeros(h, w);
    let mut obj = RgbGrid::zeros(h, w);
    for &(pr, pc, pw) in psf.support() {
        // Canvas cell of sprite cell (0, 0) for this trajectory position.
        let top = pr as isize - anchor.0 as isize;
        let left = pc as isize - anchor.1 as isize;
        for sr in 0..sh {
            let r = top + sr as isize;
            if r < 0 || r >= h as isize {
                continue;
            }
            for sc in 0..sw {
                let c = left + sc as isize;
                if c < 0 || c >= w as isize {
                    continue;
                }
                let m = sprite.mask.get(sr, sc);
                if m == 0.0 {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                alpha.add(r, c, pw * m);
                let o = sprite.rgb.get(sr, sc);
                let i = (r * w + c) * 3;
                for ch in 0..3 {
                    obj.data[i + ch] += pw * m * o[ch];
                }
            }
        }
    }
    let mut image = RgbGrid::zeros(h, w);
    for p in 0..h * w {
        let a = alpha.data[p];
        for ch in 0..3 {
            let b = background.data[p * 3 + ch];
            image.data[p * 3 + ch] = if a == 0.0 {
                b
            } else {
                obj.data[p * 3 + ch] + (1.0 - a) * b
            };
        }
    }
    Ok(CompositeResult {
        image,
        alpha,
        background: background.clone(),
    })
}

/// Binary mask of `alpha > 0`.
pub fn support_mask(alpha: &Grid) -> Vec<bool> {
    alpha.data.iter().map(|&a| a > 0.0).collect()
}

/// `iterations` rounds of erosion by a 3×3 square; cells outside the frame count as 0.
pub fn erode(mask: &[bool], height: usize, width: usize, iterations: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    let mut next = vec![false; cur.len()];
    for _ in 0..iterations {
        for r in 0..height {
            for c in 0..width {
                let keep = r > 0
                    && c > 0
                    && r + 1 < height
                    && c + 1 < width
                    && (r - 1..=r + 1)
                        .all(|rr| (c - 1..=c + 1).all(|cc| cur[rr * width + cc]));
                next[r * width + c] = keep;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// One minus the mean visibility over the eroded support of `alpha`.
pub fn blur_severity(alpha: &Grid, erosion_radius: usize) -> Result<f64> {
    if alpha.data.iter().any(|a| !(0.0..=1.0 + 1e-9).contains(a)) {
        return Err(Error::Domain("alpha values must lie in [0,1]".into()));
    }
    let beta = erode(&support_mask(alpha), alpha.height, alpha.width, erosion_radius);
    let (mut num, mut den) = (0.0, 0usize);
    for (&b, &a) in beta.iter().zip(&alpha.data) {
        if b {
            num += a;
            den += 1;
        }
    }
    if den == 0 {
        return Err(Error::EmptyErodedMask);
    }
    // Alpha can exceed 1 by rounding; BS stays in [0,1).
    Ok((1.0 - num / den as f64).max(0.0))
}

/// Discretized blur severity, clamped so sharp images land in level 1.
pub fn blur_level(bs: f64) -> Result<u8> {
    if !(0.0..1.0).contains(&bs) {
        return Err(Error::Domain(format!("blur severity {bs} outside [0,1)")));
    }
    Ok(((10.0 * bs).ceil() as u8).max(1))
}

/// Normalized `(x, y, w, h)` box: top-left corner and extent over the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

pub fn bbox_from_alpha(alpha: &Grid) -> Result<BBox> {
    let (h, w) = alpha.dims();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if alpha.get(r, c) > 0.0 {
                bounds = Some(match bounds {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::EmptyAlpha)?;
    Ok(BBox {
        x: c0 as f64 / w as f64,
        y: r0 as f64 / h as f64,
        w: (c1 - c0 + 1) as f64 / w as f64,
        h: (r1 - r0 + 1) as f64 / h as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurAnnotation {
    pub bs: f64,
    pub bl: u8,
    pub bbox: BBox,
}

/// BS, BL and box for one rendered alpha map.
pub fn annotate(alpha: &Grid, erosion_radius: usize) -> Result<BlurAnnotation> {
    let bs = blur_severity(alpha, erosion_radius)?;
    Ok(BlurAnnotation {
        bs,
        bl: blur_level(bs)?,
        bbox: bbox_from_alpha(alpha)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterThresholds {
    pub min_area_frac: f64,
    pub min_endpoint_iou: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_area_frac: 0.015,
            min_endpoint_iou: 0.20,
        }
    }
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rejects samples whose object covers too little of the frame or whose
/// endpoint silhouettes overlap too little.
pub fn accept_sample(
    mask_at_start: &[bool],
    mask_at_end: &[bool],
    alpha: &Grid,
    thresholds: FilterThresholds,
) -> bool {
    let area = alpha.count_positive() as f64 / (alpha.height * alpha.width) as f64;
    if area < thresholds.min_area_frac {
        return false;
    }
    mask_iou(mask_at_start, mask_at_end) >= thresholds.min_endpoint_iou
}
