//! Raw numeric kernels shared by the tape's forward and backward passes.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c[m, n] (+)= a[m, k] @ b[k, n]`, all row-major.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: slice lengths match the dimensions and strides given.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m, n] += a[m, k] @ b[n, k]^T`.
pub fn matmul_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(b.len(), n * k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: b is read as its transpose through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[k, n] += a[m, k]^T @ b[m, n]`.
pub fn matmul_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: a is read as its transpose through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How the per-row scale is formed from the row variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleMode {
    /// `sqrt(var + eps)`, as in layer normalization.
    SqrtVarEps,
    /// `sqrt(var) + eps`, the location-aware normalization form.
    StdPlusEps,
}

/// Standardizes each row of width `k`; returns the per-row scales and stds.
pub fn standardize_rows(x: &[f64], k: usize, eps: f64, mode: ScaleMode, y: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / k;
    let mut scales = Vec::with_capacity(rows);
    let mut stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let mean = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let std = var.sqrt();
        let s = match mode {
            ScaleMode::SqrtVarEps => (var + eps).sqrt(),
            ScaleMode::StdPlusEps => std + eps,
        };
        for (o, v) in y[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (v - mean) / s;
        }
        scales.push(s);
        stds.push(std);
    }
    (scales, stds)
}

/// Input gradient of [`standardize_rows`].
pub fn standardize_rows_backward(
    x: &[f64],
    k: usize,
    mode: ScaleMode,
    scales: &[f64],
    stds: &[f64],
    g: &[f64],
    gx: &mut [f64],
) {
    let n = k as f64;
    for (r, (&s, &std)) in scales.iter().zip(stds).enumerate() {
        let row = &x[r * k..(r + 1) * k];
        let gr = &g[r * k..(r + 1) * k];
        let mean = row.iter().sum::<f64>() / n;
        let gmean = gr.iter().sum::<f64>() / n;
        let cov: f64 = row.iter().zip(gr).map(|(v, gv)| (v - mean) * gv).sum();
        // d s / d var
        let ds_dvar = match mode {
            ScaleMode::SqrtVarEps => 0.5 / s,
            ScaleMode::StdPlusEps => {
                if std > 0.0 {
                    0.5 / std
                } else {
                    0.0
                }
            }
        };
        let coef = ds_dvar * 2.0 / n * cov / (s * s);
        for ((o, v), gv) in gx[r * k..(r + 1) * k].iter_mut().zip(row).zip(gr) {
            *o += (gv - gmean) / s - coef * (v - mean);
        }
    }
}

/// Depthwise causal convolution over `[S, E]` with kernel `[E, w]`.
///
/// Tap `w - 1` multiplies the current position; earlier taps reach back
/// within the same segment only (zero padding at each segment start).
pub fn causal_conv(
    x: &[f64],
    e: usize,
    kernel: &[f64],
    w: usize,
    bias: Option<&[f64]>,
    segments: &[Range<usize>],
    y: &mut [f64],
) {
    for seg in segments {
        for s in seg.clone() {
            let out = &mut y[s * e..(s + 1) * e];
            match bias {
                Some(b) => out.copy_from_slice(b),
                None => out.fill(0.0),
            }
            for j in 0..w {
                let back = w - 1 - j;
                if s < seg.start + back {
                    continue;
                }
                let src = &x[(s - back) * e..(s - back + 1) * e];
                for c in 0..e {
                    out[c] += kernel[c * w + j] * src[c];
                }
            }
        }
    }
}

/// Scan direction along a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Depthwise causal convolution of `x: [B, S, E]` with `kernel: [E, w]`,
/// tap `w − 1` being the current position. The backward direction convolves
/// the reversed sequence and reverses the result.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, direction: Direction) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 3 || ks.len() != 2 || ks[0] != xs[2] || ks[1] == 0 {
        return Err(Error::Shape(format!("causal_conv1d: x {xs:?}, kernel {ks:?}")));
    }
    let (b, s, e, w) = (xs[0], xs[1], xs[2], ks[1]);
    let mut out = vec![0.0; x.len()];
    let segments: Vec<Range<usize>> = (0..b).map(|i| i * s..(i + 1) * s).collect();
    match direction {
        Direction::Forward => causal_conv(x.data(), e, kernel.data(), w, None, &segments, &mut out),
        Direction::Backward => {
            let flip = |src: &[f64]| -> Vec<f64> {
                let mut v = Vec::with_capacity(src.len());
                for bi in 0..b {
                    for si in (0..s).rev() {
                        let r = bi * s + si;
                        v.extend_from_slice(&src[r * e..(r + 1) * e]);
                    }
                }
                v
            };
            let mut tmp = vec![0.0; x.len()];
            causal_conv(&flip(x.data()), e, kernel.data(), w, None, &segments, &mut tmp);
            out = flip(&tmp);
        }
    }
    Tensor::new(xs.to_vec(), out)
}

#[allow(clippy::too_many_arguments)]
pub fn causal_conv_backward(
    x: &[f64],
    e: usize,
    kernel: &[f64],
    w: usize,
    segments: &[Range<usize>],
    g: &[f64],
    gx: &mut [f64],
    gk: &mut [f64],
    mut gb: Option<&mut [f64]>,
) {
    for seg in segments {
        for s in seg.clone() {
            let gs = &g[s * e..(s + 1) * e];
            if let Some(gb) = gb.as_deref_mut() {
                for c in 0..e {
                    gb[c] += gs[c];
                }
            }
            for j in 0..w {
                let back = w - 1 - j;
                if s < seg.start + back {
                    continue;
                }
                let src = (s - back) * e;
                for c in 0..e {
                    gk[c * w + j] += gs[c] * x[src + c];
                    gx[src + c] += gs[c] * kernel[c * w + j];
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
