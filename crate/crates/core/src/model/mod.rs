//! Descriptor network: a small conv encoder, GeM pooling, blur-estimation,
//! localization and classification heads, and a projection of their
//! concatenation to the descriptor.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`Layout`]; gradients
//! use the same layout, which keeps the optimizer and checkpointing simple.

mod checkpoint;
pub mod conv;
pub mod gem;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, NamedTensor, CHECKPOINT_VERSION};
use conv::ConvShape;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    /// Negative slope 0.1.
    LeakyRelu,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::LeakyRelu if x < 0.0 => 0.1 * x,
            Nonlinearity::LeakyRelu => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            _ if x > 0.0 => 1.0,
            Nonlinearity::Relu => 0.0,
            Nonlinearity::LeakyRelu => 0.1,
        }
    }
}

/// Stages of `3×3 conv (stride) → nonlinearity`. There are no normalization layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub stride: usize,
    pub nonlinearity: Nonlinearity,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64, 128],
            stride: 2,
            nonlinearity: Nonlinearity::LeakyRelu,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.stride.pow(self.channels.len() as u32)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub c_b: usize,
    pub c_l: usize,
    pub c_c: usize,
    pub d: usize,
    /// Initial GeM power.
    pub gem_p: f64,
    pub gem_learnable: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            c_b: 16,
            c_l: 16,
            c_c: 96,
            d: 128,
            gem_p: 3.0,
            gem_learnable: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bridge: BridgeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let b = &self.bridge;
        if e.channels.is_empty() || e.channels.contains(&0) || e.stride == 0 {
            return Err(Error::Config(format!(
                "encoder needs nonzero channels and stride, got {:?} / {}",
                e.channels, e.stride
            )));
        }
        if [b.c_b, b.c_l, b.c_c, b.d].contains(&0) {
            return Err(Error::Config("head widths and descriptor dim must be > 0".into()));
        }
        if !(b.gem_p > 0.0 && b.gem_p.is_finite()) {
            return Err(Error::Config(format!("GeM power must be > 0, got {}", b.gem_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<ParamTensor>,
    pub len: usize,
}

impl Layout {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.len;
        let t = ParamTensor {
            name: name.into(),
            shape,
            offset,
        };
        self.len += t.len();
        self.tensors.push(t);
        offset
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Debug)]
struct Offsets {
    /// Weight offset per stage; the bias follows the weight directly.
    stages: Vec<usize>,
    rho: usize,
    w_be: usize,
    w_loc: usize,
    w_cls: usize,
    w_out: usize,
    w_blur: usize,
    b_blur: usize,
    w_box: usize,
    b_box: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Offsets) {
    let mut l = Layout {
        tensors: Vec::new(),
        len: 0,
    };
    let mut stages = Vec::new();
    let mut c_in = 3;
    for (i, &c) in cfg.encoder.channels.iter().enumerate() {
        stages.push(l.push(format!("encoder.{i}.weight"), vec![c, c_in, 3, 3]));
        l.push(format!("encoder.{i}.bias"), vec![c]);
        c_in = c;
    }
    let b = &cfg.bridge;
    let rho = l.push("gem.log_p", vec![1]);
    let w_be = l.push("head.be.weight", vec![b.c_b, c_in]);
    let w_loc = l.push("head.loc.weight", vec![b.c_l, c_in]);
    let w_cls = l.push("head.cls.weight", vec![b.c_c, c_in]);
    let w_out = l.push("out.weight", vec![b.d, b.c_b + b.c_l + b.c_c]);
    let w_blur = l.push("blur.weight", vec![b.c_b]);
    let b_blur = l.push("blur.bias", vec![1]);
    let w_box = l.push("box.weight", vec![4, b.c_l]);
    let b_box = l.push("box.bias", vec![4]);
    let offsets = Offsets {
        stages,
        rho,
        w_be,
        w_loc,
        w_cls,
        w_out,
        w_blur,
        b_blur,
        w_box,
        b_box,
    };
    (l, offsets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Raw descriptor, before normalization.
    pub descriptor: Vec<f64>,
    /// Predicted sharpness, trained towards `1 - bs`.
    pub blur_pred: f64,
    pub bbox_pred: [f64; 4],
    pub f_be: Vec<f64>,
    pub f_loc: Vec<f64>,
    pub f_cls: Vec<f64>,
}

/// Upstream gradient with respect to a [`ModelOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub descriptor: Vec<f64>,
    pub blur_pred: f64,
    pub bbox_pred: [f64; 4],
}

impl OutputGrad {
    pub fn zeros(d: usize) -> Self {
        OutputGrad {
            descriptor: vec![0.0; d],
            blur_pred: 0.0,
            bbox_pred: [0.0; 4],
        }
    }

    pub fn add(&mut self, other: &OutputGrad) {
        for (a, b) in self.descriptor.iter_mut().zip(&other.descriptor) {
            *a += b;
        }
        self.blur_pred += other.blur_pred;
        for (a, b) in self.bbox_pred.iter_mut().zip(&other.bbox_pred) {
            *a += b;
        }
    }
}

/// Activations kept for the backward pass of the encoder.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    shapes: Vec<ConvShape>,
    /// Input of each stage (stage 0 gets the image).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each stage.
    pre: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    encoder: EncoderCache,
    omega: Vec<f64>,
    pooled: Vec<f64>,
    pub output: ModelOutput,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W·x` for a row-major `rows × x.len()` matrix.
fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let n = x.len();
    (0..rows)
        .map(|r| w[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `dW += dy ⊗ x` and `dx += Wᵀ·dy`.
fn matvec_backward(w: &[f64], x: &[f64], dy: &[f64], d_w: &mut [f64], d_x: &mut [f64]) {
    let n = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * n..(r + 1) * n];
        for ((dw, dx), (&xi, &wi)) in d_w[r * n..(r + 1) * n].iter_mut().zip(d_x.iter_mut()).zip(x.iter().zip(row)) {
            *dw += g * xi;
            *dx += g * wi;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    offsets: Offsets,
    pub params: Vec<f64>,
}

impl Model {
    /// Zero parameters except the GeM power.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let (layout, offsets) = build_layout(&config);
        let mut params = vec![0.0; layout.len];
        params[offsets.rho] = config.bridge.gem_p.ln();
        Ok(Model {
            config,
            layout,
            offsets,
            params,
        })
    }

    /// He-normal conv weights, `1/sqrt(fan_in)` normal linear weights, zero biases.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        let mut m = Model::zeros(config)?;
        let tensors = m.layout.tensors.clone();
        for t in &tensors {
            let std = match t.shape.as_slice() {
                [_, c_in, 3, 3] if t.name.starts_with("encoder.") => (2.0 / (9 * c_in) as f64).sqrt(),
                [_, fan_in] => 1.0 / (*fan_in as f64).sqrt(),
                [n] if t.name == "blur.weight" => 1.0 / (*n as f64).sqrt(),
                _ => continue,
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut m.params[t.range()] {
                *v = normal.sample(rng);
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.bridge.d
    }

    pub fn gem_power(&self) -> f64 {
        self.params[self.offsets.rho].exp()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.params[range])
    }

    fn stage_shapes(&self, height: usize, width: usize) -> Result<Vec<ConvShape>> {
        let total = self.config.encoder.total_stride();
        if height == 0 || width == 0 || !height.is_multiple_of(total) || !width.is_multiple_of(total) {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width} is not divisible by the encoder stride {total}"
            )));
        }
        let mut shapes = Vec::new();
        let (mut h, mut w, mut c_in) = (height, width, 3);
        for &c in &self.config.encoder.channels {
            let s = ConvShape {
                in_channels: c_in,
                out_channels: c,
                in_h: h,
                in_w: w,
                stride: self.config.encoder.stride,
            };
            (h, w, c_in) = (s.out_h(), s.out_w(), c);
            shapes.push(s);
        }
        Ok(shapes)
    }

    fn stage_params(&self, i: usize, s: &ConvShape) -> (&[f64], &[f64]) {
        let off = self.offsets.stages[i];
        let wl = s.weight_len();
        self.params[off..off + wl + s.out_channels].split_at(wl)
    }

    /// Encoder forward on a planar 3×H×W image. Returns `Ω` (C×U×V) and its cache.
    pub fn encode(&self, image: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, EncoderCache)> {
        let shapes = self.stage_shapes(height, width)?;
        if image.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected 3x{height}x{width} = {} values, got {}",
                3 * height * width,
                image.len()
            )));
        }
        let act = self.config.encoder.nonlinearity;
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut pre = Vec::with_capacity(shapes.len());
        let mut x = image.to_vec();
        for (i, s) in shapes.iter().enumerate() {
            let (w, b) = self.stage_params(i, s);
            let z = conv::forward(&x, w, b, s);
            let next = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        Ok((x, EncoderCache { shapes, inputs, pre }))
    }

    /// Accumulates encoder parameter gradients from `d_omega`; returns the
    /// gradient with respect to the image when `want_input_grad`.
    pub fn encode_backward(
        &self,
        cache: &EncoderCache,
        d_omega: &[f64],
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let act = self.config.encoder.nonlinearity;
        let mut d = d_omega.to_vec();
        for i in (0..cache.shapes.len()).rev() {
            let s = &cache.shapes[i];
            for (g, &z) in d.iter_mut().zip(&cache.pre[i]) {
                *g *= act.derivative(z);
            }
            let (w, _) = self.stage_params(i, s);
            let off = self.offsets.stages[i];
            let wl = s.weight_len();
            let (d_w, d_b) = grad[off..off + wl + s.out_channels].split_at_mut(wl);
            let need_dx = i > 0 || want_input_grad;
            d = conv::backward(&cache.inputs[i], w, &d, s, d_w, d_b, need_dx)?;
        }
        Some(d)
    }

    /// Heads, auxiliary predictors and the final projection, from pooled `f`.
    pub fn bridge_forward(&self, f: &[f64]) -> ModelOutput {
        let b = &self.config.bridge;
        let o = &self.offsets;
        let c = f.len();
        let p = &self.params;
        let f_be = matvec(&p[o.w_be..o.w_be + b.c_b * c], f, b.c_b);
        let f_loc = matvec(&p[o.w_loc..o.w_loc + b.c_l * c], f, b.c_l);
        let f_cls = matvec(&p[o.w_cls..o.w_cls + b.c_c * c], f, b.c_c);
        let concat: Vec<f64> = f_be.iter().chain(&f_loc).chain(&f_cls).copied().collect();
        let descriptor = matvec(&p[o.w_out..o.w_out + b.d * concat.len()], &concat, b.d);
        let z: f64 = p[o.w_blur..o.w_blur + b.c_b].iter().zip(&f_be).map(|(a, x)| a * x).sum();
        let blur_pred = sigmoid(z + p[o.b_blur]);
        let zb = matvec(&p[o.w_box..o.w_box + 4 * b.c_l], &f_loc, 4);
        let bbox_pred = std::array::from_fn(|i| sigmoid(zb[i] + p[o.b_box + i]));
        ModelOutput {
            descriptor,
            blur_pred,
            bbox_pred,
            f_be,
            f_loc,
            f_cls,
        }
    }

    /// Accumulates bridge parameter gradients; returns `dL/df`.
    pub fn bridge_backward(&self, f: &[f64], out: &ModelOutput, d: &OutputGrad, grad: &mut [f64]) -> Vec<f64> {
        let b = &self.config.bridge;
        let o = &self.offsets;
        let c = f.len();
        let p = &self.params;
        let concat: Vec<f64> = out.f_be.iter().chain(&out.f_loc).chain(&out.f_cls).copied().collect();
        let mut d_concat = vec![0.0; concat.len()];
        let n_cat = concat.len();
        matvec_backward(
            &p[o.w_out..o.w_out + b.d * n_cat],
            &concat,
            &d.descriptor,
            &mut grad[o.w_out..o.w_out + b.d * n_cat],
            &mut d_concat,
        );
        let (d_be, rest) = d_concat.split_at_mut(b.c_b);
        let (d_loc, d_cls) = rest.split_at_mut(b.c_l);

        let dz = d.blur_pred * out.blur_pred * (1.0 - out.blur_pred);
        grad[o.b_blur] += dz;
        for i in 0..b.c_b {
            grad[o.w_blur + i] += dz * out.f_be[i];
            d_be[i] += dz * p[o.w_blur + i];
        }
        let dzb: Vec<f64> = (0..4)
            .map(|i| d.bbox_pred[i] * out.bbox_pred[i] * (1.0 - out.bbox_pred[i]))
            .collect();
        for i in 0..4 {
            grad[o.b_box + i] += dzb[i];
        }
        matvec_backward(
            &p[o.w_box..o.w_box + 4 * b.c_l],
            &out.f_loc,
            &dzb,
            &mut grad[o.w_box..o.w_box + 4 * b.c_l],
            d_loc,
        );

        let mut d_f = vec![0.0; c];
        for (off, rows, dy) in [(o.w_be, b.c_b, &*d_be), (o.w_loc, b.c_l, &*d_loc), (o.w_cls, b.c_c, &*d_cls)] {
            matvec_backward(&p[off..off + rows * c], f, dy, &mut grad[off..off + rows * c], &mut d_f);
        }
        d_f
    }

    /// Full forward pass on a planar 3×H×W image.
    pub fn forward(&self, image: &[f64], height: usize, width: usize) -> Result<ForwardCache> {
        let (omega, encoder) = self.encode(image, height, width)?;
        let pooled = gem::gem_pool(&omega, self.config.encoder.out_channels(), self.gem_power())?;
        let output = self.bridge_forward(&pooled);
        Ok(ForwardCache {
            encoder,
            omega,
            pooled,
            output,
        })
    }

    /// Accumulates `dL/dθ` into `grad` (same layout as `params`).
    pub fn backward(&self, cache: &ForwardCache, d: &OutputGrad, grad: &mut [f64]) {
        let d_f = self.bridge_backward(&cache.pooled, &cache.output, d, grad);
        let p = self.gem_power();
        let (d_omega, d_p) = gem::gem_backward(&cache.omega, self.config.encoder.out_channels(), p, &cache.pooled, &d_f);
        if self.config.bridge.gem_learnable {
            // p = exp(ρ)
            grad[self.offsets.rho] += d_p * p;
        }
        self.encode_backward(&cache.encoder, &d_omega, grad, false);
    }

    /// Unit-norm descriptor of one image.
    pub fn embed(&self, image: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        normalize(&self.forward(image, height, width)?.output.descriptor)
    }

    /// [`Model::embed`] over many images in parallel; same values as the loop.
    pub fn embed_batch(&self, images: &[Vec<f64>], height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|im| self.embed(im, height, width)).collect()
    }

    /// Pooled features `f` for a set of images.
    pub fn pooled_features(&self, images: &[Vec<f64>], height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
        images
            .par_iter()
            .map(|im| {
                let (omega, _) = self.encode(im, height, width)?;
                gem::gem_pool(&omega, self.config.encoder.out_channels(), self.gem_power())
            })
            .collect()
    }

    /// Sets `W_cls` to the PCA-whitening projection of the given pooled
    /// features: top-`C_c` principal directions scaled by `1/sqrt(λ + eps)`.
    /// Directions beyond the feature rank keep their current weights.
    pub fn whiten_cls_init(&mut self, features: &[Vec<f64>], eps: f64) -> Result<()> {
        let c = self.config.encoder.out_channels();
        if features.len() < 2 || features.iter().any(|f| f.len() != c) {
            return Err(Error::ShapeMismatch(format!(
                "whitening needs at least 2 feature vectors of length {c}"
            )));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..c).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let cov = nalgebra::DMatrix::from_fn(c, c, |i, j| {
            features.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).sum::<f64>() / n
        });
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let c_c = self.config.bridge.c_c;
        let off = self.offsets.w_cls;
        for (row, &k) in order.iter().take(c_c).enumerate() {
            let scale = 1.0 / (eig.eigenvalues[k].max(0.0) + eps).sqrt();
            for j in 0..c {
                self.params[off + row * c + j] = eig.eigenvectors[(j, k)] * scale;
            }
        }
        Ok(())
    }
}

/// `v / ‖v‖`, or [`Error::DegenerateDescriptor`] when `‖v‖ < 1e-12`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= 1e-12) {
        return Err(Error::DegenerateDescriptor(norm));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}
