//! Training losses with analytic gradients: blur estimation, localization,
//! ArcFace classification, contrastive, and their weighted sum over a tuple.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize, ModelOutput, OutputGrad};

/// Bound on `|s|` where the derivative of the margin term is singular.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_cls: f64,
    pub alpha_be: f64,
    pub alpha_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_cls: 0.1,
            alpha_be: 1.0,
            alpha_loc: 10.0,
        }
    }
}

/// Per-component loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub con: f64,
    pub cls: f64,
    pub be: f64,
    pub loc: f64,
}

impl LossComponents {
    pub fn joint(&self, w: &LossWeights) -> f64 {
        self.con + w.alpha_cls * self.cls + w.alpha_be * self.be + w.alpha_loc * self.loc
    }
}

/// `|p̂ - (1 - bs)|` and its derivative in `p̂` (0 at the kink).
pub fn blur_estimation_loss(p_hat: f64, bs: f64) -> (f64, f64) {
    let r = p_hat - (1.0 - bs);
    (r.abs(), sign(r))
}

/// L1 distance over the four box components, and its gradient in `pred`.
pub fn localization_loss(pred: &[f64; 4], gt: &[f64; 4]) -> (f64, [f64; 4]) {
    let loss = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    (loss, std::array::from_fn(|i| sign(pred[i] - gt[i])))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ArcFace-adjusted cosine: `s` for non-target classes, `cos(acos(s) + m)` for
/// the target, evaluated as `s·cos m - sqrt(1 - s²)·sin m` with `s` clamped to [-1, 1].
pub fn arcface_adjust(s: f64, target: bool, margin: f64) -> f64 {
    if target {
        let s = s.clamp(-1.0, 1.0);
        s * margin.cos() - (1.0 - s * s).sqrt() * margin.sin()
    } else {
        s
    }
}

/// `d/ds` of [`arcface_adjust`], with `s` clamped to `±COS_CLAMP` so it stays finite.
fn arcface_adjust_grad(s: f64, target: bool, margin: f64) -> f64 {
    if !target {
        return 1.0;
    }
    let s = s.clamp(-COS_CLAMP, COS_CLAMP);
    margin.cos() + s * margin.sin() / (1.0 - s * s).sqrt()
}

/// Class weights `ŵ_n` (one row of length d per class) with margin and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceParams {
    pub weights: Vec<f64>,
    pub n_classes: usize,
    pub dim: usize,
    pub margin: f64,
    pub scale: f64,
}

impl ArcFaceParams {
    pub fn new(weights: Vec<f64>, n_classes: usize, dim: usize, margin: f64, scale: f64) -> Result<Self> {
        if weights.len() != n_classes * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} class weights for {n_classes} classes of dim {dim}",
                weights.len()
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) || !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ArcFace needs 0 <= m < pi/2 and scale > 0, got m={margin}, scale={scale}"
            )));
        }
        Ok(ArcFaceParams {
            weights,
            n_classes,
            dim,
            margin,
            scale,
        })
    }

    pub fn class(&self, n: usize) -> &[f64] {
        &self.weights[n * self.dim..(n + 1) * self.dim]
    }
}

/// Gradient of `v/‖v‖` pulled back to `v`.
pub fn normalize_backward(v: &[f64], d_unit: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = v.iter().zip(d_unit).map(|(a, b)| a * b).sum::<f64>() / norm;
    v.iter().zip(d_unit).map(|(x, g)| (g - x / norm * dot) / norm).collect()
}

/// Logits `γ·AF(ŵ_nᵀD̂, n = t)` and the normalized inputs they came from.
struct ClsForward {
    d_hat: Vec<f64>,
    w_hat: Vec<Vec<f64>>,
    cos: Vec<f64>,
    logits: Vec<f64>,
}

fn cls_forward(descriptor: &[f64], arc: &ArcFaceParams, target: usize) -> Result<ClsForward> {
    if descriptor.len() != arc.dim || target >= arc.n_classes || arc.n_classes < 2 {
        return Err(Error::ShapeMismatch(format!(
            "descriptor of dim {} / label {target} vs {} classes of dim {}",
            descriptor.len(),
            arc.n_classes,
            arc.dim
        )));
    }
    let d_hat = normalize(descriptor)?;
    let w_hat = (0..arc.n_classes)
        .map(|n| normalize(arc.class(n)))
        .collect::<Result<Vec<_>>>()?;
    let cos: Vec<f64> = w_hat.iter().map(|w| w.iter().zip(&d_hat).map(|(a, b)| a * b).sum()).collect();
    let logits = cos
        .iter()
        .enumerate()
        .map(|(n, &s)| arc.scale * arcface_adjust(s, n == target, arc.margin))
        .collect();
    Ok(ClsForward {
        d_hat,
        w_hat,
        cos,
        logits,
    })
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// ArcFace cross-entropy `-log softmax(z)_t`.
pub fn classification_loss(descriptor: &[f64], arc: &ArcFaceParams, target: usize) -> Result<f64> {
    let f = cls_forward(descriptor, arc, target)?;
    Ok(log_sum_exp(&f.logits) - f.logits[target])
}

/// Loss, gradient in the raw descriptor, and gradient in the raw class weights.
pub fn classification_loss_grad(
    descriptor: &[f64],
    arc: &ArcFaceParams,
    target: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let f = cls_forward(descriptor, arc, target)?;
    let lse = log_sum_exp(&f.logits);
    let mut d_dhat = vec![0.0; arc.dim];
    let mut d_w = vec![0.0; arc.weights.len()];
    for n in 0..arc.n_classes {
        let softmax = (f.logits[n] - lse).exp();
        let d_z = softmax - if n == target { 1.0 } else { 0.0 };
        let d_s = d_z * arc.scale * arcface_adjust_grad(f.cos[n], n == target, arc.margin);
        if d_s == 0.0 {
            continue;
        }
        for (g, w) in d_dhat.iter_mut().zip(&f.w_hat[n]) {
            *g += d_s * w;
        }
        let d_what: Vec<f64> = f.d_hat.iter().map(|x| d_s * x).collect();
        let d_wn = normalize_backward(arc.class(n), &d_what);
        d_w[n * arc.dim..(n + 1) * arc.dim].copy_from_slice(&d_wn);
    }
    Ok((lse - f.logits[target], normalize_backward(descriptor, &d_dhat), d_w))
}

/// Contrastive loss on unit descriptors: `0.5·‖a-b‖²` for matches,
/// `0.5·max(0, τ - ‖a-b‖)²` otherwise.
pub fn contrastive_loss(a: &[f64], b: &[f64], matching: bool, tau: f64) -> f64 {
    contrastive_loss_grad(a, b, matching, tau).0
}

/// Loss and its gradient in `a` (the gradient in `b` is the negation).
pub fn contrastive_loss_grad(a: &[f64], b: &[f64], matching: bool, tau: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let dist2: f64 = diff.iter().map(|x| x * x).sum();
    if matching {
        return (0.5 * dist2, diff);
    }
    let dist = dist2.sqrt();
    let gap = tau - dist;
    if gap <= 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    let grad = if dist > 0.0 {
        diff.iter().map(|x| -gap * x / dist).collect()
    } else {
        vec![0.0; a.len()]
    };
    (0.5 * gap * gap, grad)
}

/// One image of a tuple with its targets.
#[derive(Clone, Copy, Debug)]
pub struct TupleImage<'a> {
    pub output: &'a ModelOutput,
    pub bs: f64,
    pub bbox: [f64; 4],
    /// Training class index.
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TupleLoss {
    pub components: LossComponents,
    pub joint: f64,
    /// Gradient per input image, in order.
    pub image_grads: Vec<OutputGrad>,
    /// Gradient in the raw class weights.
    pub arcface_grad: Vec<f64>,
}

/// Joint loss of one tuple: `images[0]` is the query, the next `n_positives`
/// are positives and the rest negatives. The contrastive term averages over
/// the query's pairs; the other terms average over all images.
pub fn joint_loss(
    images: &[TupleImage<'_>],
    n_positives: usize,
    arc: &ArcFaceParams,
    weights: &LossWeights,
    tau: f64,
) -> Result<TupleLoss> {
    if images.len() < 2 || n_positives >= images.len() {
        return Err(Error::InvalidParameter(format!(
            "tuple of {} images with {n_positives} positives",
            images.len()
        )));
    }
    let n = images.len();
    let dim = images[0].output.descriptor.len();
    let unit = images
        .iter()
        .map(|im| normalize(&im.output.descriptor))
        .collect::<Result<Vec<_>>>()?;
    let mut c = LossComponents::default();
    let mut d_unit = vec![vec![0.0; dim]; n];
    let pairs = (n - 1) as f64;
    for j in 1..n {
        let (l, g) = contrastive_loss_grad(&unit[0], &unit[j], j <= n_positives, tau);
        c.con += l / pairs;
        for k in 0..dim {
            d_unit[0][k] += g[k] / pairs;
            d_unit[j][k] -= g[k] / pairs;
        }
    }

    let mut image_grads = Vec::with_capacity(n);
    let mut arcface_grad = vec![0.0; arc.weights.len()];
    let per_image = 1.0 / n as f64;
    for (i, im) in images.iter().enumerate() {
        let out = im.output;
        let mut descriptor = normalize_backward(&out.descriptor, &d_unit[i]);
        let (l_cls, d_desc, d_w) = classification_loss_grad(&out.descriptor, arc, im.label)?;
        c.cls += l_cls * per_image;
        let s = weights.alpha_cls * per_image;
        for (g, d) in descriptor.iter_mut().zip(&d_desc) {
            *g += s * d;
        }
        for (g, d) in arcface_grad.iter_mut().zip(&d_w) {
            *g += s * d;
        }
        let (l_be, d_be) = blur_estimation_loss(out.blur_pred, im.bs);
        c.be += l_be * per_image;
        let (l_loc, d_loc) = localization_loss(&out.bbox_pred, &im.bbox);
        c.loc += l_loc * per_image;
        image_grads.push(OutputGrad {
            descriptor,
            blur_pred: weights.alpha_be * per_image * d_be,
            bbox_pred: d_loc.map(|g| weights.alpha_loc * per_image * g),
        });
    }
    Ok(TupleLoss {
        joint: c.joint(weights),
        components: c,
        image_grads,
        arcface_grad,
    })
}
