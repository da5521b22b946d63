//! Dense neural-net primitives on ndarray: 3x3 convolutions via im2col,
//! nearest-neighbor resampling, SiLU, layer norm, and scaled dot-product
//! attention. Every forward has a matching hand-written backward.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};

/// Unfolds 3x3 neighborhoods (zero padding 1) of every view into matrix rows.
/// Row order is (view, out_row, out_col); element order is (ky, kx, channel).
pub fn im2col(x: &Array4<f64>, stride: usize) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut cols = Array2::zeros((n * ho * wo, 9 * c));
    for vi in 0..n {
        for yo in 0..ho {
            for xo in 0..wo {
                let row = (vi * ho + yo) * wo + xo;
                for ky in 0..3 {
                    let yi = (yo * stride + ky) as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xi = (xo * stride + kx) as isize - 1;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            cols[[row, base + ch]] = x[[vi, yi as usize, xi as usize, ch]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add adjoint of [`im2col`].
pub fn col2im(d_cols: &Array2<f64>, dim: (usize, usize, usize, usize), stride: usize) -> Array4<f64> {
    let (n, h, w, c) = dim;
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut dx = Array4::zeros(dim);
    for vi in 0..n {
        for yo in 0..ho {
            for xo in 0..wo {
                let row = (vi * ho + yo) * wo + xo;
                for ky in 0..3 {
                    let yi = (yo * stride + ky) as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xi = (xo * stride + kx) as isize - 1;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dx[[vi, yi as usize, xi as usize, ch]] += d_cols[[row, base + ch]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 3x3 convolution over every view. `w` is (9 * c_in, c_out). Returns the
/// output and the unfolded input for reuse in the backward pass.
pub fn conv_forward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>,
    b: &ArrayView1<f64>,
    stride: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (n, h, _, _) = x.dim();
    let ho = h.div_ceil(stride);
    let c_out = w.ncols();
    let cols = im2col(x, stride);
    let mut flat = cols.dot(w);
    flat += &b.view().insert_axis(Axis(0));
    let out = flat.into_shape_with_order((n, ho, ho, c_out)).expect("conv shape");
    (out, cols)
}

/// Gradients of [`conv_forward`]: returns (d_input, d_w, d_b).
pub fn conv_backward(
    cols: &Array2<f64>,
    w: &ArrayView2<f64>,
    d_out: &Array4<f64>,
    input_dim: (usize, usize, usize, usize),
    stride: usize,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let (n, ho, wo, c_out) = d_out.dim();
    let flat = d_out
        .view()
        .into_shape_with_order((n * ho * wo, c_out))
        .expect("d_out layout");
    let d_w = cols.t().dot(&flat);
    let d_b = flat.sum_axis(Axis(0));
    let d_cols = flat.dot(&w.t());
    let d_x = col2im(&d_cols, input_dim, stride);
    (d_x, d_w, d_b)
}

pub fn silu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// d(silu)/dx evaluated at pre-activation `z`, times downstream gradient.
pub fn silu_backward(z: &Array4<f64>, d_post: &Array4<f64>) -> Array4<f64> {
    let mut out = d_post.clone();
    out.zip_mut_with(z, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    out
}

pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    Array4::from_shape_fn((n, h * 2, w * 2, c), |(vi, y, xx, ch)| x[[vi, y / 2, xx / 2, ch]])
}

pub fn upsample2_backward(d_out: &Array4<f64>) -> Array4<f64> {
    let (n, h2, w2, c) = d_out.dim();
    let mut dx = Array4::zeros((n, h2 / 2, w2 / 2, c));
    for vi in 0..n {
        for y in 0..h2 {
            for x in 0..w2 {
                for ch in 0..c {
                    dx[[vi, y / 2, x / 2, ch]] += d_out[[vi, y, x, ch]];
                }
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(3), &[a.view(), b.view()]).expect("channel concat")
}

pub fn split_channels(d: &Array4<f64>, c_first: usize) -> (Array4<f64>, Array4<f64>) {
    let (view_a, view_b) = d.view().split_at(Axis(3), c_first);
    (view_a.to_owned(), view_b.to_owned())
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer norm. Returns (normalized * gamma + beta, xhat, 1/std).
pub fn layernorm_forward(
    x: &Array2<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("rows");
    let mut xhat = x.clone();
    for (mut row, &m) in xhat.axis_iter_mut(Axis(0)).zip(mean.iter()) {
        row.mapv_inplace(|v| v - m);
    }
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    for (mut row, &s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter()) {
        row.mapv_inplace(|v| v * s);
    }
    let mut y = xhat.clone();
    y *= &gamma.view().insert_axis(Axis(0));
    y += &beta.view().insert_axis(Axis(0));
    (y, xhat, inv_std)
}

/// Gradients of [`layernorm_forward`]: returns (d_x, d_gamma, d_beta).
pub fn layernorm_backward(
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gamma: &ArrayView1<f64>,
    d_y: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = xhat.ncols() as f64;
    let d_gamma = (d_y * xhat).sum_axis(Axis(0));
    let d_beta = d_y.sum_axis(Axis(0));

    let d_xhat = d_y * &gamma.view().insert_axis(Axis(0));
    let row_mean = d_xhat.mean_axis(Axis(1)).expect("rows");
    let row_dot = (&d_xhat * xhat).sum_axis(Axis(1)) / d;
    let mut d_x = d_xhat;
    for ((mut row, xh_row), (&m, (&dot, &s))) in d_x
        .axis_iter_mut(Axis(0))
        .zip(xhat.axis_iter(Axis(0)))
        .zip(row_mean.iter().zip(row_dot.iter().zip(inv_std.iter())))
    {
        for (g, &xh) in row.iter_mut().zip(xh_row.iter()) {
            *g = (*g - m - xh * dot) * s;
        }
    }
    (d_x, d_gamma, d_beta)
}

/// Scaled dot-product attention over a full token set. Keys and values may
/// carry extra leading rows injected from another stream; queries always come
/// from the local stream. Returns the attended values and the softmax weights.
pub fn attention_core(
    q: &Array2<f64>,
    k_full: &Array2<f64>,
    v_full: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d_k = q.ncols() as f64;
    let scale = 1.0 / d_k.sqrt();
    let mut logits = q.dot(&k_full.t());
    logits *= scale;
    let p = softmax_rows(&logits);
    let out = p.dot(v_full);
    (out, p)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Softmax adjoint per row: d_logits = p * (d_p - sum(d_p * p)).
pub fn softmax_backward(p: &Array2<f64>, d_p: &Array2<f64>) -> Array2<f64> {
    let row_dot = (p * d_p).sum_axis(Axis(1));
    let mut d_logits = d_p.clone();
    for ((mut row, p_row), &dot) in d_logits
        .axis_iter_mut(Axis(0))
        .zip(p.axis_iter(Axis(0)))
        .zip(row_dot.iter())
    {
        for (g, &pv) in row.iter_mut().zip(p_row.iter()) {
            *g = pv * (*g - dot);
        }
    }
    d_logits
}
