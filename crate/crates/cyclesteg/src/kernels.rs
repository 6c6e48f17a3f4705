//! Raw forward/backward compute kernels over flat f64 buffers.
//!
//! Convolutions go through im2col + a small blocked GEMM; everything here is
//! single-threaded and fully deterministic.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Output extent of a strided convolution, erroring when non-integral.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::BadConvGeometry {
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Map a (possibly out-of-range) coordinate into [0, n) under the pad mode.
/// Returns None for zero padding outside the image.
#[inline(always)]
fn pad_index(t: isize, n: usize, mode: PadMode) -> Option<usize> {
    if t >= 0 && (t as usize) < n {
        return Some(t as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            // reflect without repeating the border pixel: -1 -> 1, n -> n-2
            let m = if t < 0 { -t } else { 2 * (n as isize - 1) - t };
            debug_assert!(m >= 0 && (m as usize) < n, "reflect pad out of range");
            Some(m as usize)
        }
    }
}

/// c[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the reduction pipelines.
#[inline]
fn dot8(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = x.len() / 8;
    for ci in 0..chunks {
        let xs = &x[ci * 8..ci * 8 + 8];
        let ys = &y[ci * 8..ci * 8 + 8];
        for t in 0..8 {
            acc[t] += xs[t] * ys[t];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for j in chunks * 8..x.len() {
        s += x[j] * y[j];
    }
    s
}

/// c[m x k] += a[m x n] * b[k x n]^T  (row-by-row dot products)
pub fn matmul_abt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            c[i * k + l] += dot8(arow, brow);
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n]
pub fn matmul_atb_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

/// Unfold input [cin,h,w] into columns [cin*kh*kw, ho*wo].
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; cin * kh * kw * ho * wo];
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &mut cols[((c * kh + u) * kw + v) * hw..((c * kh + u) * kw + v + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * stride + u) as isize - padding as isize;
                    let src_h = pad_index(ih, h, mode);
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    if let Some(sh) = src_h {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride + v) as isize - padding as isize;
                            if let Some(sw) = pad_index(iw, w, mode) {
                                *d = plane[sh * w + sw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of im2col: scatter columns [cin*kh*kw, ho*wo] back into [cin,h,w].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cin * h * w];
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &cols[((c * kh + u) * kw + v) * hw..((c * kh + u) * kw + v + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * stride + u) as isize - padding as isize;
                    if let Some(sh) = pad_index(ih, h, mode) {
                        let src = &row[oh * wo..(oh + 1) * wo];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * stride + v) as isize - padding as isize;
                            if let Some(sw) = pad_index(iw, w, mode) {
                                plane[sh * w + sw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
    pub ho: usize,
    pub wo: usize,
}

/// Cross-correlation forward: kernels [cout,cin,kh,kw], input [cin,h,w].
pub fn conv2d_forward(input: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(
        input, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.padding, g.mode, g.ho, g.wo,
    );
    let r = g.cin * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * hw];
    matmul_acc(&mut out, kernels, &cols, g.cout, r, hw);
    out
}

/// Backward of conv2d: returns (grad_input, grad_kernels).
pub fn conv2d_backward(
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let r = g.cin * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let cols = im2col(
        input, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.padding, g.mode, g.ho, g.wo,
    );
    let mut grad_kernels = vec![0.0; g.cout * r];
    matmul_abt_acc(&mut grad_kernels, grad_out, &cols, g.cout, hw, r);
    let mut grad_cols = vec![0.0; r * hw];
    matmul_atb_acc(&mut grad_cols, kernels, grad_out, g.cout, r, hw);
    let grad_input = col2im(
        &grad_cols, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.padding, g.mode, g.ho, g.wo,
    );
    (grad_input, grad_kernels)
}

/// Transposed convolution forward: kernels [cin,cout,kh,kw], input [cin,h,w],
/// output [cout, (h-1)*stride - 2*padding + kh, ...]. Zero padding only.
pub fn conv_transpose2d_forward(
    input: &[f64],
    kernels: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let r = cout * kh * kw;
    let hw = h * w;
    let mut m = vec![0.0; r * hw];
    matmul_atb_acc(&mut m, kernels, input, cin, r, hw);
    col2im(
        &m,
        cout,
        ho,
        wo,
        kh,
        kw,
        stride,
        padding,
        PadMode::Zero,
        h,
        w,
    )
}

/// Backward of transposed convolution: returns (grad_input, grad_kernels).
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<f64>) {
    let r = cout * kh * kw;
    let hw = h * w;
    let gcols = im2col(
        grad_out,
        cout,
        ho,
        wo,
        kh,
        kw,
        stride,
        padding,
        PadMode::Zero,
        h,
        w,
    );
    let mut grad_input = vec![0.0; cin * hw];
    matmul_acc(&mut grad_input, kernels, &gcols, cin, r, hw);
    let mut grad_kernels = vec![0.0; cin * r];
    matmul_abt_acc(&mut grad_kernels, input, &gcols, cin, hw, r);
    (grad_input, grad_kernels)
}

/// Instance norm forward over [c,h,w]; returns (output, mean, invstd) per channel.
pub fn instance_norm_forward(
    input: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; c * hw];
    let mut means = vec![0.0; c];
    let mut invstds = vec![0.0; c];
    for ci in 0..c {
        let x = &input[ci * hw..(ci + 1) * hw];
        let mean = x.iter().sum::<f64>() / hw as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let invstd = 1.0 / (var + eps).sqrt();
        means[ci] = mean;
        invstds[ci] = invstd;
        let (g, b) = (gamma[ci], beta[ci]);
        for (o, &v) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(x.iter()) {
            *o = (v - mean) * invstd * g + b;
        }
    }
    (out, means, invstds)
}

/// Instance norm backward; returns (grad_input, grad_gamma, grad_beta).
#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    input: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    means: &[f64],
    invstds: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; c * hw];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let n = hw as f64;
    for ci in 0..c {
        let x = &input[ci * hw..(ci + 1) * hw];
        let dy = &grad_out[ci * hw..(ci + 1) * hw];
        let (mean, invstd) = (means[ci], invstds[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (&v, &d) in x.iter().zip(dy.iter()) {
            let xhat = (v - mean) * invstd;
            sum_dy += d;
            sum_dy_xhat += d * xhat;
        }
        gb[ci] = sum_dy;
        gg[ci] = sum_dy_xhat;
        let g = gamma[ci];
        let mean_dy = sum_dy / n;
        let mean_dy_xhat = sum_dy_xhat / n;
        for ((o, &v), &d) in gx[ci * hw..(ci + 1) * hw]
            .iter_mut()
            .zip(x.iter())
            .zip(dy.iter())
        {
            let xhat = (v - mean) * invstd;
            *o = g * invstd * (d - mean_dy - xhat * mean_dy_xhat);
        }
    }
    (gx, gg, gb)
}
