//! 3×3 convolution with zero padding 1, as im2col + GEMM.

/// Row-major GEMM `c = alpha·op(a)·op(b) + beta·c` over raw strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the index ranges implied by (m, k, n) and the
    // row/column strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 - 3) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 - 3) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }

    fn col_rows(&self) -> usize {
        self.in_channels * 9
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    let mut col = vec![0.0; s.col_rows() * n];
    for ci in 0..s.in_channels {
        let plane = &x[ci * s.in_h * s.in_w..(ci + 1) * s.in_h * s.in_w];
        for kr in 0..3 {
            for kc in 0..3 {
                let row = &mut col[((ci * 9) + kr * 3 + kc) * n..][..n];
                for y in 0..oh {
                    let iy = (y * s.stride + kr) as isize - 1;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.in_w..][..s.in_w];
                    for xo in 0..ow {
                        let ix = (xo * s.stride + kc) as isize - 1;
                        if ix >= 0 && ix < s.in_w as isize {
                            row[y * ow + xo] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    for ci in 0..s.in_channels {
        let plane = &mut dx[ci * s.in_h * s.in_w..(ci + 1) * s.in_h * s.in_w];
        for kr in 0..3 {
            for kc in 0..3 {
                let row = &col[((ci * 9) + kr * 3 + kc) * n..][..n];
                for y in 0..oh {
                    let iy = (y * s.stride + kr) as isize - 1;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let ix = (xo * s.stride + kc) as isize - 1;
                        if ix >= 0 && ix < s.in_w as isize {
                            plane[iy as usize * s.in_w + ix as usize] += row[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

/// `x`: C_in×H×W, `weight`: C_out×C_in×3×3, returns C_out×H_out×W_out.
pub fn forward(x: &[f64], weight: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let col = im2col(x, s);
    let n = s.col_cols();
    let mut out = vec![0.0; s.out_channels * n];
    for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(s.out_channels, s.col_rows(), n, weight, false, &col, false, &mut out, 1.0);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub fn backward(
    x: &[f64],
    weight: &[f64],
    d_out: &[f64],
    s: &ConvShape,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let col = im2col(x, s);
    let n = s.col_cols();
    let k = s.col_rows();
    for (co, chunk) in d_out.chunks_exact(n).enumerate() {
        d_bias[co] += chunk.iter().sum::<f64>();
    }
    // dW (C_out×k) += dOut (C_out×n) · colᵀ (n×k)
    gemm(s.out_channels, n, k, d_out, false, &col, true, d_weight, 1.0);
    if !want_input_grad {
        return None;
    }
    // dcol (k×n) = Wᵀ (k×C_out) · dOut (C_out×n)
    let mut dcol = vec![0.0; k * n];
    gemm(k, s.out_channels, n, weight, true, d_out, false, &mut dcol, 0.0);
    let mut dx = vec![0.0; x.len()];
    col2im(&dcol, s, &mut dx);
    Some(dx)
}
