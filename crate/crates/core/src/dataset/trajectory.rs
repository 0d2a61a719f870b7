//! Linear trajectories split into equal sub-segments, and realization of one
//! image from a window of consecutive sub-segments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blur_synth::{
    accept_sample, annotate, composite, mask_iou, rasterize_linear_psf, support_mask, BlurAnnotation,
    CompositeResult, FilterThresholds, Point, PointSpreadFunction, Sprite,
};
use crate::error::{Error, Result};
use crate::raster::RgbGrid;

pub const DEFAULT_SUBSEGMENTS: usize = 23;
pub const MAX_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub full_start: Point,
    pub full_end: Point,
    pub n_subsegments: usize,
    pub selected_start_index: usize,
    /// Number of consecutive sub-segments exposed; 0 is the sharp image.
    pub selected_count: usize,
}

impl TrajectorySpec {
    pub fn midpoint(&self) -> Point {
        self.full_start.lerp(self.full_end, 0.5)
    }

    pub fn length(&self) -> f64 {
        self.full_start.distance(self.full_end)
    }

    /// The same trajectory with a centered window of `k` sub-segments.
    pub fn with_window(&self, k: usize) -> Result<TrajectorySpec> {
        if k > MAX_WINDOW || k > self.n_subsegments {
            return Err(Error::InvalidParameter(format!(
                "window of {k} sub-segments exceeds the limit of {}",
                MAX_WINDOW.min(self.n_subsegments)
            )));
        }
        Ok(TrajectorySpec {
            selected_start_index: (self.n_subsegments - k) / 2,
            selected_count: k,
            ..self.clone()
        })
    }

    /// Start and end of the selected window; equal to the midpoint when sharp.
    pub fn window_endpoints(&self) -> (Point, Point) {
        if self.selected_count == 0 {
            let m = self.midpoint();
            return (m, m);
        }
        let n = self.n_subsegments as f64;
        let t0 = self.selected_start_index as f64 / n;
        let t1 = (self.selected_start_index + self.selected_count) as f64 / n;
        (
            self.full_start.lerp(self.full_end, t0),
            self.full_start.lerp(self.full_end, t1),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrajectorySampling {
    pub frame: (usize, usize),
    pub min_length: f64,
    pub max_length: f64,
    pub n_subsegments: usize,
    pub max_retries: usize,
}

impl TrajectorySampling {
    pub fn new(frame: (usize, usize)) -> Self {
        TrajectorySampling {
            frame,
            min_length: 0.0,
            max_length: 0.6 * frame.0.min(frame.1) as f64,
            n_subsegments: DEFAULT_SUBSEGMENTS,
            max_retries: 1000,
        }
    }
}

/// Uniform length in `[min_length, max_length]`, uniform direction, midpoint
/// uniform over positions where the sprite fits. The endpoints of the longest
/// renderable window keep the sprite's center inside the frame; the parts of
/// the trajectory that are never exposed may leave it.
pub fn sample_trajectory(
    rng: &mut impl Rng,
    sampling: &TrajectorySampling,
    sprite_extent: usize,
) -> Result<TrajectorySpec> {
    let (h, w) = sampling.frame;
    let half = sprite_extent as f64 / 2.0;
    let (lo_r, hi_r) = (half, h as f64 - 1.0 - half);
    let (lo_c, hi_c) = (half, w as f64 - 1.0 - half);
    if lo_r > hi_r || lo_c > hi_c {
        return Err(Error::GenerationFailure(format!(
            "sprite of extent {sprite_extent} does not fit a {h}x{w} frame"
        )));
    }
    let inside = |p: Point| {
        (0.0..=h as f64 - 1.0).contains(&p.row) && (0.0..=w as f64 - 1.0).contains(&p.col)
    };
    if !(0.0..=sampling.max_length).contains(&sampling.min_length) {
        return Err(Error::InvalidParameter(format!(
            "trajectory length range [{}, {}] is empty",
            sampling.min_length, sampling.max_length
        )));
    }
    for _ in 0..sampling.max_retries {
        let len = if sampling.max_length > 0.0 {
            rng.random_range(sampling.min_length..=sampling.max_length)
        } else {
            0.0
        };
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mid = Point::new(rng.random_range(lo_r..=hi_r), rng.random_range(lo_c..=hi_c));
        let (dr, dc) = (angle.sin() * len / 2.0, angle.cos() * len / 2.0);
        let spec = TrajectorySpec {
            full_start: Point::new(mid.row - dr, mid.col - dc),
            full_end: Point::new(mid.row + dr, mid.col + dc),
            n_subsegments: sampling.n_subsegments,
            selected_start_index: sampling.n_subsegments / 2,
            selected_count: 0,
        };
        let (a, b) = spec.with_window(MAX_WINDOW)?.window_endpoints();
        if inside(a) && inside(b) {
            return Ok(spec);
        }
    }
    Err(Error::GenerationFailure(format!(
        "no valid trajectory after {} attempts",
        sampling.max_retries
    )))
}

#[derive(Clone, Copy, Debug)]
pub struct RealizeParams {
    pub psf_samples: usize,
    pub erosion_radius: usize,
    pub filter: FilterThresholds,
}

impl Default for RealizeParams {
    fn default() -> Self {
        RealizeParams {
            psf_samples: 64,
            erosion_radius: 3,
            filter: FilterThresholds::default(),
        }
    }
}

fn round_cell(p: Point, frame: (usize, usize)) -> (usize, usize) {
    let r = p.row.round().clamp(0.0, frame.0 as f64 - 1.0) as usize;
    let c = p.col.round().clamp(0.0, frame.1 as f64 - 1.0) as usize;
    (r, c)
}

/// Visible part of the sprite silhouette with its anchor at `cell`, in
/// sprite-local coordinates.
fn visible_silhouette(sprite: &Sprite, anchor: (usize, usize), cell: (usize, usize), frame: (usize, usize)) -> Vec<bool> {
    let (sh, sw) = sprite.dims();
    let top = cell.0 as isize - anchor.0 as isize;
    let left = cell.1 as isize - anchor.1 as isize;
    let mask = support_mask(&sprite.mask);
    (0..sh * sw)
        .map(|i| {
            let (r, c) = (top + (i / sw) as isize, left + (i % sw) as isize);
            mask[i] && r >= 0 && c >= 0 && r < frame.0 as isize && c < frame.1 as isize
        })
        .collect()
}

/// Renders the image for window size `k` and annotates it.
///
/// The endpoint filter compares the silhouettes at the two window endpoints
/// aligned on the object, so it measures appearance change (here: clipping by
/// the frame) rather than displacement.
pub fn realize_record(
    sprite: &Sprite,
    background: &RgbGrid,
    traj: &TrajectorySpec,
    k: usize,
    params: &RealizeParams,
) -> Result<(CompositeResult, BlurAnnotation)> {
    let traj = traj.with_window(k)?;
    let frame = background.dims();
    let anchor = sprite.center();
    let (start, end) = traj.window_endpoints();
    let psf = if k == 0 {
        let (r, c) = round_cell(traj.midpoint(), frame);
        PointSpreadFunction::delta(frame, r, c)?
    } else {
        rasterize_linear_psf(start, end, frame, params.psf_samples)?
    };
    let result = composite(&psf, sprite, anchor, background)?;
    let at_start = visible_silhouette(sprite, anchor, round_cell(start, frame), frame);
    let at_end = visible_silhouette(sprite, anchor, round_cell(end, frame), frame);
    if !accept_sample(&at_start, &at_end, &result.alpha, params.filter) {
        return Err(Error::RecordRejected(format!(
            "area {:.4} / endpoint IoU {:.3} below thresholds",
            result.alpha.count_positive() as f64 / (frame.0 * frame.1) as f64,
            mask_iou(&at_start, &at_end)
        )));
    }
    let annotation = annotate(&result.alpha, params.erosion_radius).map_err(|e| match e {
        Error::EmptyErodedMask => Error::RecordRejected("eroded support is empty".into()),
        other => other,
    })?;
    Ok((result, annotation))
}
