//! Training loop (Adam on the joint loss over blur-windowed tuples) and
//! embedding of manifest splits.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, ArcFaceParams, LossComponents, LossWeights, TupleImage};
use crate::model::{BridgeConfig, Checkpoint, CheckpointHeader, EncoderConfig, Model, ModelConfig, NamedTensor, Nonlinearity, OutputGrad, CHECKPOINT_VERSION};
use crate::raster::read_rgba_png;
use crate::retrieval::DescriptorStore;
use crate::rng;
use crate::sampler::{epoch_batches, ContrastiveTuple, SamplerConfig, SamplerPool};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
const ARCFACE_TENSOR: &str = "arcface.weight";
/// Images per gradient-accumulation chunk. Fixed so that the summation
/// order, and hence the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Training settings; every field is a flat config key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: usize,
    pub batch_tuples: usize,
    pub alpha_cls: f64,
    pub alpha_be: f64,
    pub alpha_loc: f64,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
    pub contrastive_margin: f64,
    pub blur_radius: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub channels: Vec<usize>,
    pub stride: usize,
    pub nonlinearity: Nonlinearity,
    pub c_b: usize,
    pub c_l: usize,
    pub c_c: usize,
    pub descriptor_dim: usize,
    pub gem_p: f64,
    pub gem_learnable: bool,
    pub whitening_init: bool,
    /// Train on the sharp training images only.
    pub sharp_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let bridge = BridgeConfig::default();
        let w = LossWeights::default();
        let s = SamplerConfig::default();
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            epochs: 10,
            max_steps: 0,
            batch_tuples: 32,
            alpha_cls: w.alpha_cls,
            alpha_be: w.alpha_be,
            alpha_loc: w.alpha_loc,
            arcface_margin: 0.15,
            arcface_scale: 30.0,
            contrastive_margin: 0.7,
            blur_radius: s.r,
            n_pos: s.n_p,
            n_neg: s.n_n,
            channels: enc.channels,
            stride: enc.stride,
            nonlinearity: enc.nonlinearity,
            c_b: bridge.c_b,
            c_l: bridge.c_l,
            c_c: bridge.c_c,
            descriptor_dim: bridge.d,
            gem_p: bridge.gem_p,
            gem_learnable: bridge.gem_learnable,
            whitening_init: false,
            sharp_only: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: self.channels.clone(),
                stride: self.stride,
                nonlinearity: self.nonlinearity,
            },
            bridge: BridgeConfig {
                c_b: self.c_b,
                c_l: self.c_l,
                c_c: self.c_c,
                d: self.descriptor_dim,
                gem_p: self.gem_p,
                gem_learnable: self.gem_learnable,
            },
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_cls: self.alpha_cls,
            alpha_be: self.alpha_be,
            alpha_loc: self.alpha_loc,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            r: self.blur_radius,
            n_p: self.n_pos,
            n_n: self.n_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_tuples == 0 {
            return Err(Error::Config("lr must be > 0, epochs and batch_tuples >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and adam_eps > 0".into()));
        }
        if [self.alpha_cls, self.alpha_be, self.alpha_loc, self.weight_decay].iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Config("loss weights and weight_decay must be >= 0".into()));
        }
        if !(self.contrastive_margin > 0.0) {
            return Err(Error::Config("contrastive_margin must be > 0".into()));
        }
        self.sampler().validate()?;
        self.model_config().validate()
    }
}

/// Adam; `weight_decay` adds an L2 term to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + cfg.weight_decay * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            params[i] -= cfg.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.adam_eps);
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub components: LossComponents,
    pub joint: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub arcface: ArcFaceParams,
    pub log: Vec<LogRow>,
}

/// Decoded images of a manifest, planar 3×H×W in f32.
pub struct ImageCache {
    pub height: usize,
    pub width: usize,
    images: HashMap<usize, Vec<f32>>,
}

impl ImageCache {
    pub fn load(manifest: &DatasetManifest, indices: &[usize]) -> Result<Self> {
        let loaded: Vec<(usize, (usize, usize), Vec<f32>)> = indices
            .par_iter()
            .map(|&i| {
                let (rgb, _) = read_rgba_png(&manifest.image_path(&manifest.records[i]))?;
                Ok((i, rgb.dims(), rgb.to_planar().into_iter().map(|v| v as f32).collect()))
            })
            .collect::<Result<_>>()?;
        let (height, width) = loaded.first().map(|l| l.1).unwrap_or((0, 0));
        if let Some(l) = loaded.iter().find(|l| l.1 != (height, width)) {
            return Err(Error::ShapeMismatch(format!(
                "record {} is {:?}, expected {:?}",
                manifest.records[l.0].path,
                l.1,
                (height, width)
            )));
        }
        Ok(ImageCache {
            height,
            width,
            images: loaded.into_iter().map(|(i, _, v)| (i, v)).collect(),
        })
    }

    pub fn get(&self, index: usize) -> Vec<f64> {
        self.images[&index].iter().map(|&v| f64::from(v)).collect()
    }
}

fn write_log_header(path: &Path) -> Result<std::fs::File> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "epoch,step,L_con,L_cls,L_be,L_loc,L_joint").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

fn checkpoint(model: &Model, arc: &ArcFaceParams, cfg: &TrainConfig, seed: u64, epoch: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        header: CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            seed,
            epoch,
            train: serde_json::to_value(cfg)?,
        },
        model: model.clone(),
        extra: vec![NamedTensor {
            name: ARCFACE_TENSOR.into(),
            shape: vec![arc.n_classes, arc.dim],
            data: arc.weights.clone(),
        }],
    })
}

/// Loss and gradients of one batch of tuples, averaged over tuples.
struct BatchResult {
    components: LossComponents,
    joint: f64,
    grad: Vec<f64>,
    arc_grad: Vec<f64>,
}

fn batch_gradient(
    model: &Model,
    arc: &ArcFaceParams,
    batch: &[ContrastiveTuple],
    manifest: &DatasetManifest,
    images: &ImageCache,
    labels: &HashMap<u64, usize>,
    cfg: &TrainConfig,
) -> Result<BatchResult> {
    let unique: Vec<usize> = batch.iter().flat_map(|t| t.all()).collect::<BTreeSet<_>>().into_iter().collect();
    let slot: HashMap<usize, usize> = unique.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    let caches = unique
        .par_iter()
        .map(|&i| model.forward(&images.get(i), images.height, images.width))
        .collect::<Result<Vec<_>>>()?;

    let n_tuples = batch.len() as f64;
    let weights = cfg.loss_weights();
    let mut components = LossComponents::default();
    let mut joint = 0.0;
    let mut out_grads = vec![OutputGrad::zeros(model.descriptor_dim()); unique.len()];
    let mut arc_grad = vec![0.0; arc.weights.len()];
    for t in batch {
        let members: Vec<usize> = t.all().collect();
        let tuple: Vec<TupleImage> = members
            .iter()
            .map(|&i| {
                let r = &manifest.records[i];
                TupleImage {
                    output: &caches[slot[&i]].output,
                    bs: r.bs,
                    bbox: r.bbox,
                    label: labels[&r.object_id],
                }
            })
            .collect();
        let l = joint_loss(&tuple, t.positives.len(), arc, &weights, cfg.contrastive_margin)?;
        components.con += l.components.con / n_tuples;
        components.cls += l.components.cls / n_tuples;
        components.be += l.components.be / n_tuples;
        components.loc += l.components.loc / n_tuples;
        joint += l.joint / n_tuples;
        for (&i, g) in members.iter().zip(&l.image_grads) {
            let mut g = g.clone();
            g.descriptor.iter_mut().for_each(|v| *v /= n_tuples);
            g.blur_pred /= n_tuples;
            g.bbox_pred.iter_mut().for_each(|v| *v /= n_tuples);
            out_grads[slot[&i]].add(&g);
        }
        for (a, g) in arc_grad.iter_mut().zip(&l.arcface_grad) {
            *a += g / n_tuples;
        }
    }

    let partial: Vec<Vec<f64>> = caches
        .par_chunks(GRAD_CHUNK)
        .zip(out_grads.par_chunks(GRAD_CHUNK))
        .map(|(cs, gs)| {
            let mut grad = vec![0.0; model.params.len()];
            for (c, g) in cs.iter().zip(gs) {
                model.backward(c, g, &mut grad);
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0; model.params.len()];
    for p in &partial {
        for (a, b) in grad.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(BatchResult {
        components,
        joint,
        grad,
        arc_grad,
    })
}

/// Record indices the trainer samples from.
pub fn training_pool(manifest: &DatasetManifest, sharp_only: bool) -> Vec<usize> {
    manifest
        .split_indices(Split::Train)
        .into_iter()
        .filter(|&i| !sharp_only || manifest.records[i].is_sharp)
        .collect()
}

/// Trains on the manifest's training split. Writes `train_log.csv`, one
/// checkpoint per epoch and `model.ckpt` (the final epoch) into `out_dir`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, seed: u64, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let members = training_pool(manifest, cfg.sharp_only);
    let objects: BTreeSet<u64> = members.iter().map(|&i| manifest.records[i].object_id).collect();
    if objects.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "training needs at least 2 objects, found {}",
            objects.len()
        )));
    }
    let labels: HashMap<u64, usize> = objects.iter().enumerate().map(|(i, &o)| (o, i)).collect();
    let images = ImageCache::load(manifest, &members)?;
    let pool = SamplerPool::new(&manifest.records, members.clone())?;

    let mcfg = cfg.model_config();
    let mut model = Model::new(mcfg, &mut rng::stream(seed, &[rng::TAG_INIT, 0]))?;
    let d = model.descriptor_dim();
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    let mut init_rng = rng::stream(seed, &[rng::TAG_INIT, 1]);
    let arc_weights = (0..objects.len() * d).map(|_| normal.sample(&mut init_rng)).collect();
    let mut arc = ArcFaceParams::new(arc_weights, objects.len(), d, cfg.arcface_margin, cfg.arcface_scale)?;
    if cfg.whitening_init {
        let planar: Vec<Vec<f64>> = members.iter().map(|&i| images.get(i)).collect();
        let feats = model.pooled_features(&planar, images.height, images.width)?;
        model.whiten_cls_init(&feats, 1e-6)?;
    }

    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = write_log_header(&log_path)?;
    let mut log = Vec::new();
    let mut adam = Adam::new(model.params.len());
    let mut adam_arc = Adam::new(arc.weights.len());
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&pool, cfg.batch_tuples, &cfg.sampler(), seed, epoch as u64)? {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let r = batch_gradient(&model, &arc, &batch, manifest, &images, &labels, cfg)?;
            let finite = r.joint.is_finite() && r.grad.iter().chain(&r.arc_grad).all(|g| g.is_finite());
            if !finite {
                let dump = dump_state(out_dir, &model, &arc, cfg, seed, epoch, step, &batch)?;
                return Err(Error::NonFiniteLoss { epoch, step, dump });
            }
            adam.step(&mut model.params, &r.grad, cfg);
            adam_arc.step(&mut arc.weights, &r.arc_grad, cfg);
            let row = LogRow {
                epoch,
                step,
                components: r.components,
                joint: r.joint,
            };
            let c = &row.components;
            writeln!(
                log_file,
                "{},{},{},{},{},{},{}",
                epoch, step, c.con, c.cls, c.be, c.loc, row.joint
            )
            .map_err(|e| Error::io(&log_path, e))?;
            log.push(row);
            step += 1;
        }
        checkpoint(&model, &arc, cfg, seed, epoch)?.save(&out_dir.join(format!("checkpoint_epoch{epoch:03}.ckpt")))?;
    }
    let last_epoch = log.last().map_or(0, |r| r.epoch);
    checkpoint(&model, &arc, cfg, seed, last_epoch)?.save(&out_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome { model, arcface: arc, log })
}

#[allow(clippy::too_many_arguments)]
fn dump_state(
    out_dir: &Path,
    model: &Model,
    arc: &ArcFaceParams,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
    step: usize,
    batch: &[ContrastiveTuple],
) -> Result<PathBuf> {
    let ckpt = out_dir.join("nonfinite_state.ckpt");
    checkpoint(model, arc, cfg, seed, epoch)?.save(&ckpt)?;
    let path = out_dir.join("nonfinite_state.json");
    let tuples: Vec<serde_json::Value> = batch
        .iter()
        .map(|t| serde_json::json!({"query": t.query, "positives": t.positives, "negatives": t.negatives}))
        .collect();
    let doc = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "checkpoint": ckpt,
        "batch": tuples,
        "gem_p": model.gem_power(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Unit descriptors of every record in `split`; ids are manifest line indices.
pub fn embed_split(model: &Model, manifest: &DatasetManifest, split: Split) -> Result<DescriptorStore> {
    let indices = manifest.split_indices(split);
    let images = ImageCache::load(manifest, &indices)?;
    let descriptors = indices
        .par_iter()
        .map(|&i| model.embed(&images.get(i), images.height, images.width))
        .collect::<Result<Vec<_>>>()?;
    let mut store = DescriptorStore::new(model.descriptor_dim());
    for (&i, d) in indices.iter().zip(&descriptors) {
        let r = &manifest.records[i];
        store.push(i as u64, r.object_id, r.bl, d)?;
    }
    Ok(store)
}
