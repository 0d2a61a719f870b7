//! Generalized-mean pooling over the spatial cells of each channel.

use crate::error::{Error, Result};

/// `f_c = (mean_{u,v} max(x_{c,u,v}, 0)^p)^(1/p)` for a C×(U·V) map.
pub fn gem_pool(map: &[f64], channels: usize, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Domain(format!("GeM power must be > 0, got {p}")));
    }
    if channels == 0 || !map.len().is_multiple_of(channels) {
        return Err(Error::ShapeMismatch(format!(
            "feature map of {} values is not divisible into {channels} channels",
            map.len()
        )));
    }
    let n = map.len() / channels;
    Ok(map
        .chunks_exact(n)
        .map(|ch| {
            let mean = ch.iter().map(|&x| x.max(0.0).powf(p)).sum::<f64>() / n as f64;
            mean.powf(1.0 / p)
        })
        .collect())
}

/// Gradients of GeM given the upstream `d_f`: returns `(d_map, d_p)`.
///
/// Cells clamped to zero and channels that pool to zero get zero gradient.
pub fn gem_backward(map: &[f64], channels: usize, p: f64, pooled: &[f64], d_f: &[f64]) -> (Vec<f64>, f64) {
    let n = map.len() / channels;
    let mut d_map = vec![0.0; map.len()];
    let mut d_p = 0.0;
    for c in 0..channels {
        let f = pooled[c];
        if f <= 0.0 || d_f[c] == 0.0 {
            continue;
        }
        let ch = &map[c * n..(c + 1) * n];
        let mut sum_pow = 0.0;
        let mut sum_pow_log = 0.0;
        for (i, &x) in ch.iter().enumerate() {
            if x > 0.0 {
                let r = x / f;
                d_map[c * n + i] = d_f[c] * r.powf(p - 1.0) / n as f64;
                let xp = x.powf(p);
                sum_pow += xp;
                sum_pow_log += xp * x.ln();
            }
        }
        let mean = sum_pow / n as f64;
        // d/dp (1/p)·ln(mean) then chain through exp.
        let dlog = -mean.ln() / (p * p) + sum_pow_log / (sum_pow * p);
        d_p += d_f[c] * f * dlog;
    }
    (d_map, d_p)
}
