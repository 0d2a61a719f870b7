//! Dataset generation: candidate windows per trajectory, blur-balanced
//! selection, splitting, rendering and manifest writing.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sprites::{make_sprite, Palette, SpriteSize};
use super::split::{split_dataset, SplitRatios};
use super::trajectory::{realize_record, sample_trajectory, RealizeParams, TrajectorySampling, TrajectorySpec, MAX_WINDOW};
use super::{BackgroundSource, DatasetManifest, DatasetMeta, ImageRecord, Split, MANIFEST_FILE, MANIFEST_VERSION, META_FILE};
use crate::blur_synth::{BlurAnnotation, CompositeResult, FilterThresholds, Sprite};
use crate::error::{Error, Result};
use crate::raster::{write_rgba_png, RgbGrid};
use crate::rng;

/// Generation settings. Every field is a flat config key; defaults are the
/// desk-scale dataset (16 objects, ~2k images at 64×64).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub categories: u32,
    pub objects_per_category: usize,
    pub trajectories_per_object: usize,
    /// Images kept per trajectory, the sharp one included.
    pub images_per_trajectory: usize,
    pub sprite_min: usize,
    pub sprite_max: usize,
    /// Per-channel deviation of object colors from their category's palette.
    pub color_jitter: f64,
    /// Full-trajectory length range as fractions of `min(height, width)`.
    pub min_trajectory_frac: f64,
    pub max_trajectory_frac: f64,
    pub subsegments: usize,
    pub psf_samples: usize,
    pub erosion_radius: usize,
    pub min_area_frac: f64,
    pub min_endpoint_iou: f64,
    /// Windows whose blur level exceeds this are discarded.
    pub max_blur_level: u8,
    /// Largest allowed ratio between the fullest and emptiest blur level of
    /// the training split.
    pub balance_ratio: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub queries_per_test_object: usize,
    pub distractor_objects_per_category: usize,
    pub distractor_trajectories_per_object: usize,
    /// Directory of background images; empty means procedural backgrounds.
    pub background_dir: String,
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            height: 64,
            width: 64,
            categories: 8,
            objects_per_category: 10,
            trajectories_per_object: 4,
            images_per_trajectory: 7,
            sprite_min: 24,
            sprite_max: 30,
            color_jitter: 1.0,
            min_trajectory_frac: 0.5,
            max_trajectory_frac: 1.8,
            subsegments: 23,
            psf_samples: 64,
            erosion_radius: 3,
            min_area_frac: 0.015,
            min_endpoint_iou: 0.20,
            max_blur_level: 6,
            balance_ratio: 2.0,
            train_ratio: 0.70,
            val_ratio: 0.15,
            test_ratio: 0.15,
            queries_per_test_object: 1,
            distractor_objects_per_category: 0,
            distractor_trajectories_per_object: 10,
            background_dir: String::new(),
            max_retries: 200,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("frame dimensions must be positive");
        }
        if self.sprite_min == 0 || self.sprite_min > self.sprite_max {
            return bad("sprite_min must be in [1, sprite_max]");
        }
        if self.sprite_max >= self.height.min(self.width) {
            return bad("sprite_max must be smaller than the frame");
        }
        if self.images_per_trajectory == 0 || self.images_per_trajectory > MAX_WINDOW + 1 {
            return bad("images_per_trajectory must be in [1, 11]");
        }
        if self.subsegments < MAX_WINDOW {
            return bad("subsegments must be at least 10");
        }
        if !(1..=10).contains(&self.max_blur_level) {
            return bad("max_blur_level must be in [1, 10]");
        }
        if self.psf_samples == 0 || self.max_retries == 0 {
            return bad("psf_samples and max_retries must be positive");
        }
        if !(self.color_jitter >= 0.0) {
            return bad("color_jitter must be >= 0");
        }
        if !(0.0..=self.max_trajectory_frac).contains(&self.min_trajectory_frac) {
            return bad("min_trajectory_frac must be in [0, max_trajectory_frac]");
        }
        if self.balance_ratio < 1.0 {
            return bad("balance_ratio must be >= 1");
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    fn realize_params(&self) -> RealizeParams {
        RealizeParams {
            psf_samples: self.psf_samples,
            erosion_radius: self.erosion_radius,
            filter: FilterThresholds {
                min_area_frac: self.min_area_frac,
                min_endpoint_iou: self.min_endpoint_iou,
            },
        }
    }

    fn sampling(&self) -> TrajectorySampling {
        TrajectorySampling {
            frame: (self.height, self.width),
            min_length: self.min_trajectory_frac * self.height.min(self.width) as f64,
            max_length: self.max_trajectory_frac * self.height.min(self.width) as f64,
            n_subsegments: self.subsegments,
            max_retries: self.max_retries,
        }
    }

    fn sprite_size(&self) -> SpriteSize {
        SpriteSize {
            min: self.sprite_min,
            max: self.sprite_max,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ObjectSpec {
    object_id: u64,
    category_id: u32,
    trajectories: usize,
    distractor: bool,
}

fn object_specs(config: &DatasetConfig) -> Vec<ObjectSpec> {
    let mut out = Vec::new();
    let main = config.objects_per_category as u64;
    for c in 0..config.categories {
        for o in 0..main {
            out.push(ObjectSpec {
                object_id: u64::from(c) * main + o,
                category_id: c,
                trajectories: config.trajectories_per_object,
                distractor: false,
            });
        }
    }
    // Distractor ids start after every regular object.
    let base = u64::from(config.categories) * main;
    let extra = config.distractor_objects_per_category as u64;
    for c in 0..config.categories {
        for o in 0..extra {
            out.push(ObjectSpec {
                object_id: base + u64::from(c) * extra + o,
                category_id: c,
                trajectories: config.distractor_trajectories_per_object,
                distractor: true,
            });
        }
    }
    out
}

fn object_sprite(config: &DatasetConfig, seed: u64, obj: &ObjectSpec) -> Sprite {
    let palette = Palette::random(
        config.color_jitter,
        &mut rng::stream(seed, &[rng::TAG_PALETTE, obj.category_id.into()]),
    );
    let mut r = rng::stream(seed, &[rng::TAG_SPRITE, obj.object_id]);
    make_sprite(obj.category_id, config.sprite_size(), &palette, &mut r)
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    k: usize,
    bl: u8,
}

struct TrajectoryPlan {
    object_index: usize,
    traj_index: usize,
    attempt: u64,
    spec: TrajectorySpec,
    candidates: Vec<Candidate>,
}

fn trajectory_background(
    seed: u64,
    obj: &ObjectSpec,
    t: usize,
    attempt: u64,
    config: &DatasetConfig,
    backgrounds: &BackgroundSource,
) -> Result<RgbGrid> {
    let mut r = rng::stream(seed, &[rng::TAG_BACKGROUND, obj.object_id, t as u64, attempt]);
    backgrounds.sample(config.height, config.width, &mut r)
}

/// Samples trajectory `t` of an object until its sharp image and enough
/// blurred windows pass the filters.
fn plan_trajectory(
    config: &DatasetConfig,
    seed: u64,
    object_index: usize,
    obj: &ObjectSpec,
    sprite: &Sprite,
    t: usize,
    backgrounds: &BackgroundSource,
) -> Result<TrajectoryPlan> {
    let sampling = config.sampling();
    let params = config.realize_params();
    let extent = sprite.dims().0.max(sprite.dims().1);
    let needed_blurred = config.images_per_trajectory - 1;
    for attempt in 0..config.max_retries as u64 {
        let mut r = rng::stream(seed, &[rng::TAG_TRAJECTORY, obj.object_id, t as u64, attempt]);
        let spec = sample_trajectory(&mut r, &sampling, extent)?;
        let bg = trajectory_background(seed, obj, t, attempt, config, backgrounds)?;
        let mut candidates = Vec::new();
        for k in 0..=MAX_WINDOW {
            match realize_record(sprite, &bg, &spec, k, &params) {
                Ok((_, ann)) if ann.bl <= config.max_blur_level => candidates.push(Candidate { k, bl: ann.bl }),
                Ok(_) | Err(Error::RecordRejected(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let has_sharp = candidates.first().is_some_and(|c| c.k == 0);
        if has_sharp && candidates.len() > needed_blurred {
            return Ok(TrajectoryPlan {
                object_index,
                traj_index: t,
                attempt,
                spec,
                candidates,
            });
        }
    }
    Err(Error::GenerationFailure(format!(
        "object {} trajectory {t}: no acceptable trajectory in {} attempts",
        obj.object_id, config.max_retries
    )))
}

/// Greedy blur balancing: the sharp image, then repeatedly the window whose
/// level is currently least represented.
fn select_windows(plan: &TrajectoryPlan, variants: usize, counts: &mut [usize]) -> Vec<Candidate> {
    let mut chosen = vec![plan.candidates[0]];
    counts[plan.candidates[0].bl as usize] += 1;
    let mut pool: Vec<Candidate> = plan.candidates[1..].to_vec();
    while chosen.len() < variants && !pool.is_empty() {
        let (i, _) = pool
            .iter()
            .enumerate()
            .min_by_key(|(_, c)| (counts[c.bl as usize], std::cmp::Reverse(c.bl), c.k))
            .expect("pool is non-empty");
        let c = pool.remove(i);
        counts[c.bl as usize] += 1;
        chosen.push(c);
    }
    chosen
}

fn record_path(object_id: u64, t: usize, k: usize) -> String {
    format!("images/o{object_id:05}_t{t:03}_k{k:02}.png")
}

/// Inverse of the image naming scheme: `(object_id, trajectory index, k)`.
fn parse_record_path(path: &str) -> Option<(u64, usize, usize)> {
    let stem = Path::new(path).file_stem()?.to_str()?;
    let mut parts = stem.split('_');
    let o = parts.next()?.strip_prefix('o')?.parse().ok()?;
    let t = parts.next()?.strip_prefix('t')?.parse().ok()?;
    let k = parts.next()?.strip_prefix('k')?.parse().ok()?;
    Some((o, t, k))
}

fn background_source(config: &DatasetConfig) -> Result<BackgroundSource> {
    if config.background_dir.is_empty() {
        Ok(BackgroundSource::procedural())
    } else {
        BackgroundSource::from_dir(Path::new(&config.background_dir))
    }
}

fn check_balance(manifest: &DatasetManifest, config: &DatasetConfig) -> Result<()> {
    let mut counts = vec![0usize; config.max_blur_level as usize + 1];
    for r in manifest.records.iter().filter(|r| r.split == Split::Train) {
        counts[r.bl as usize] += 1;
    }
    let levels = &counts[1..];
    let (min, max) = (*levels.iter().min().unwrap(), *levels.iter().max().unwrap());
    if min == 0 || max as f64 > config.balance_ratio * min as f64 {
        return Err(Error::GenerationFailure(format!(
            "training blur levels unbalanced: counts per level {levels:?}, allowed ratio {}",
            config.balance_ratio
        )));
    }
    Ok(())
}

/// Generates images and manifest into `out_dir`.
pub fn build_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let backgrounds = background_source(config)?;
    let objects = object_specs(config);
    let sprites: Vec<Sprite> = objects.par_iter().map(|o| object_sprite(config, seed, o)).collect();

    let jobs: Vec<(usize, usize)> = objects
        .iter()
        .enumerate()
        .flat_map(|(i, o)| (0..o.trajectories).map(move |t| (i, t)))
        .collect();
    let plans: Vec<TrajectoryPlan> = jobs
        .par_iter()
        .map(|&(i, t)| plan_trajectory(config, seed, i, &objects[i], &sprites[i], t, &backgrounds))
        .collect::<Result<_>>()?;

    let mut counts = vec![0usize; config.max_blur_level as usize + 1];
    let mut distractor_counts = counts.clone();
    let mut records = Vec::new();
    let mut sources = Vec::new();
    for plan in &plans {
        let obj = &objects[plan.object_index];
        let counts = if obj.distractor { &mut distractor_counts } else { &mut counts };
        let mut chosen = select_windows(plan, config.images_per_trajectory, counts);
        chosen.sort_by_key(|c| c.k);
        for c in chosen {
            records.push(ImageRecord {
                path: record_path(obj.object_id, plan.traj_index, c.k),
                object_id: obj.object_id,
                category_id: obj.category_id,
                trajectory_id: obj.object_id * config.trajectories_per_object.max(config.distractor_trajectories_per_object) as u64
                    + plan.traj_index as u64,
                bs: f64::NAN,
                bl: c.bl,
                bbox: [0.0; 4],
                is_sharp: c.k == 0,
                split: if obj.distractor { Split::Distractor } else { Split::Train },
            });
            sources.push((plan, c.k));
        }
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed,
        records,
    };
    let mut manifest = split_dataset(&manifest, config.split_ratios(), config.queries_per_test_object)?;
    check_balance(&manifest, config)?;

    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let params = config.realize_params();
    let annotations: Vec<BlurAnnotation> = manifest
        .records
        .par_iter()
        .zip(sources.par_iter())
        .map(|(rec, &(plan, k))| {
            let obj = &objects[plan.object_index];
            let bg = trajectory_background(seed, obj, plan.traj_index, plan.attempt, config, &backgrounds)?;
            let (img, ann) = realize_record(&sprites[plan.object_index], &bg, &plan.spec, k, &params)?;
            write_rgba_png(&out_dir.join(&rec.path), &img.image, &img.alpha)?;
            Ok(ann)
        })
        .collect::<Result<_>>()?;
    for (rec, ann) in manifest.records.iter_mut().zip(annotations) {
        debug_assert_eq!(rec.bl, ann.bl);
        rec.bs = ann.bs;
        rec.bl = ann.bl;
        rec.bbox = ann.bbox.to_array();
    }

    manifest.write_jsonl(&out_dir.join(MANIFEST_FILE))?;
    let meta = DatasetMeta {
        version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
    };
    let meta_path = out_dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(manifest)
}

/// Re-renders one manifest record at full precision from the generation
/// config and seed.
pub fn realize_manifest_record(
    config: &DatasetConfig,
    seed: u64,
    record: &ImageRecord,
) -> Result<(CompositeResult, BlurAnnotation)> {
    let (object_id, t, k) = parse_record_path(&record.path).ok_or_else(|| Error::Format {
        what: "record path",
        detail: record.path.clone(),
    })?;
    let objects = object_specs(config);
    let (index, obj) = objects
        .iter()
        .enumerate()
        .find(|(_, o)| o.object_id == object_id)
        .ok_or_else(|| Error::Config(format!("object {object_id} is not produced by this config")))?;
    let backgrounds = background_source(config)?;
    let sprite = object_sprite(config, seed, obj);
    let plan = plan_trajectory(config, seed, index, obj, &sprite, t, &backgrounds)?;
    let bg = trajectory_background(seed, obj, t, plan.attempt, config, &backgrounds)?;
    realize_record(&sprite, &bg, &plan.spec, k, &config.realize_params())
}
