//! Tensor kernels: convolutions, linear maps, activations, attention.
//!
//! Spatial tensors are `(T, H, W, C)`. Convolutions are im2col + matmul so
//! the heavy lifting stays in the BLAS-like kernel.

use ndarray::{Array1, Array2, Array4, Axis};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// d/dx silu(x), given the forward input.
pub fn silu_backward(dy: &Array4<f64>, x: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

pub fn silu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2_backward(dy: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// Output spatial size of a convolution axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Frame-wise 2D convolution. Weight layout `(kh, kw, c_in, c_out)`.
/// Returns the output and the im2col matrix needed by the backward pass.
pub fn conv2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (t_len, h, wid, c_in) = x.dim();
    let (kh, kw, wc_in, c_out) = w.dim();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wid, kw, stride, pad);

    let mut cols = Array2::zeros((t_len * ho * wo, kh * kw * c_in));
    {
        // Contiguous row-major copies over the channel axis.
        let x_std = x.as_standard_layout();
        let x_flat = x_std.as_slice().expect("standard layout");
        let row_len = kh * kw * c_in;
        let cols_flat = cols.as_slice_mut().expect("cols is standard layout");
        for t in 0..t_len {
            let x_t = t * h * wid * c_in;
            for oi in 0..ho {
                for oj in 0..wo {
                    let row = (t * ho + oi) * wo + oj;
                    let row_base = row * row_len;
                    for ki in 0..kh {
                        let si = (oi * stride + ki) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let x_row = x_t + si as usize * wid * c_in;
                        for kj in 0..kw {
                            let sj = (oj * stride + kj) as isize - pad as isize;
                            if sj < 0 || sj >= wid as isize {
                                continue;
                            }
                            let src = x_row + sj as usize * c_in;
                            let dst = row_base + (ki * kw + kj) * c_in;
                            cols_flat[dst..dst + c_in]
                                .copy_from_slice(&x_flat[src..src + c_in]);
                        }
                    }
                }
            }
        }
    }

    let w_mat = w
        .view()
        .into_shape_with_order((kh * kw * c_in, c_out))
        .expect("contiguous weight");
    let mut out_mat = cols.dot(&w_mat);
    out_mat += &b.view().insert_axis(Axis(0));
    let out = out_mat
        .into_shape_with_order((t_len, ho, wo, c_out))
        .expect("conv output shape");
    (out, cols)
}

/// Gradients of [`conv2d`]: input, weight, and bias.
pub fn conv2d_backward(
    dy: &Array4<f64>,
    cols: &Array2<f64>,
    w: &Array4<f64>,
    x_dim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (t_len, h, wid, c_in) = x_dim;
    let (kh, kw, _, c_out) = w.dim();
    let (_, ho, wo, _) = dy.dim();

    let dy_mat = dy
        .view()
        .into_shape_with_order((t_len * ho * wo, c_out))
        .expect("contiguous dy");
    let dw_mat = cols.t().dot(&dy_mat);
    let dw = dw_mat
        .into_shape_with_order((kh, kw, c_in, c_out))
        .expect("dw shape");
    let db = dy_mat.sum_axis(Axis(0));

    let w_mat = w
        .view()
        .into_shape_with_order((kh * kw * c_in, c_out))
        .expect("contiguous weight");
    let d_cols = dy_mat.dot(&w_mat.t());

    let mut dx = Array4::zeros(x_dim);
    {
        let dx_flat = dx.as_slice_mut().expect("dx is standard layout");
        let d_cols_std = d_cols.as_standard_layout();
        let d_cols_flat = d_cols_std.as_slice().expect("standard layout");
        let row_len = kh * kw * c_in;
        for t in 0..t_len {
            let x_t = t * h * wid * c_in;
            for oi in 0..ho {
                for oj in 0..wo {
                    let row = (t * ho + oi) * wo + oj;
                    let row_base = row * row_len;
                    for ki in 0..kh {
                        let si = (oi * stride + ki) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let x_row = x_t + si as usize * wid * c_in;
                        for kj in 0..kw {
                            let sj = (oj * stride + kj) as isize - pad as isize;
                            if sj < 0 || sj >= wid as isize {
                                continue;
                            }
                            let dst = x_row + sj as usize * c_in;
                            let src = row_base + (ki * kw + kj) * c_in;
                            for ci in 0..c_in {
                                dx_flat[dst + ci] += d_cols_flat[src + ci];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Convolution along the frame axis, mixing channels per spatial position.
/// Weight layout `(kt, c_in, c_out)`; zero padding keeps T unchanged.
pub fn temporal_conv(
    x: &Array4<f64>,
    w: &ndarray::Array3<f64>,
    b: &Array1<f64>,
) -> (Array4<f64>, Array2<f64>) {
    let (t_len, h, wid, c_in) = x.dim();
    let (kt, wc_in, c_out) = w.dim();
    assert_eq!(c_in, wc_in, "temporal_conv channel mismatch");
    let pad = kt / 2;

    let mut cols = Array2::zeros((t_len * h * wid, kt * c_in));
    {
        let x_std = x.as_standard_layout();
        let x_flat = x_std.as_slice().expect("standard layout");
        let cols_flat = cols.as_slice_mut().expect("cols is standard layout");
        let frame = h * wid * c_in;
        let row_len = kt * c_in;
        for t in 0..t_len {
            for k in 0..kt {
                let st = t as isize + k as isize - pad as isize;
                if st < 0 || st >= t_len as isize {
                    continue;
                }
                let src_frame = st as usize * frame;
                for p in 0..h * wid {
                    let src = src_frame + p * c_in;
                    let dst = (t * h * wid + p) * row_len + k * c_in;
                    cols_flat[dst..dst + c_in].copy_from_slice(&x_flat[src..src + c_in]);
                }
            }
        }
    }

    let w_mat = w
        .view()
        .into_shape_with_order((kt * c_in, c_out))
        .expect("contiguous weight");
    let mut out_mat = cols.dot(&w_mat);
    out_mat += &b.view().insert_axis(Axis(0));
    let out = out_mat
        .into_shape_with_order((t_len, h, wid, c_out))
        .expect("temporal conv shape");
    (out, cols)
}

pub fn temporal_conv_backward(
    dy: &Array4<f64>,
    cols: &Array2<f64>,
    w: &ndarray::Array3<f64>,
    x_dim: (usize, usize, usize, usize),
) -> (Array4<f64>, ndarray::Array3<f64>, Array1<f64>) {
    let (t_len, h, wid, c_in) = x_dim;
    let (kt, _, c_out) = w.dim();
    let pad = kt / 2;

    let dy_mat = dy
        .view()
        .into_shape_with_order((t_len * h * wid, c_out))
        .expect("contiguous dy");
    let dw = cols
        .t()
        .dot(&dy_mat)
        .into_shape_with_order((kt, c_in, c_out))
        .expect("dw shape");
    let db = dy_mat.sum_axis(Axis(0));

    let w_mat = w
        .view()
        .into_shape_with_order((kt * c_in, c_out))
        .expect("contiguous weight");
    let d_cols = dy_mat.dot(&w_mat.t());

    let mut dx = Array4::zeros(x_dim);
    {
        let dx_flat = dx.as_slice_mut().expect("dx is standard layout");
        let d_cols_std = d_cols.as_standard_layout();
        let d_cols_flat = d_cols_std.as_slice().expect("standard layout");
        let frame = h * wid * c_in;
        let row_len = kt * c_in;
        for t in 0..t_len {
            for k in 0..kt {
                let st = t as isize + k as isize - pad as isize;
                if st < 0 || st >= t_len as isize {
                    continue;
                }
                let dst_frame = st as usize * frame;
                for p in 0..h * wid {
                    let dst = dst_frame + p * c_in;
                    let src = (t * h * wid + p) * row_len + k * c_in;
                    for ci in 0..c_in {
                        dx_flat[dst + ci] += d_cols_flat[src + ci];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `y = x . w + b` over rows.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.view().insert_axis(Axis(0));
    y
}

pub fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Nearest-neighbor 2x spatial upsample.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (t_len, h, w, c) = x.dim();
    let mut y = Array4::zeros((t_len, 2 * h, 2 * w, c));
    for t in 0..t_len {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let v = x[[t, i, j, ch]];
                    y[[t, 2 * i, 2 * j, ch]] = v;
                    y[[t, 2 * i + 1, 2 * j, ch]] = v;
                    y[[t, 2 * i, 2 * j + 1, ch]] = v;
                    y[[t, 2 * i + 1, 2 * j + 1, ch]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (t_len, h2, w2, c) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((t_len, h, w, c));
    for t in 0..t_len {
        for i in 0..h2 {
            for j in 0..w2 {
                for ch in 0..c {
                    dx[[t, i / 2, j / 2, ch]] += dy[[t, i, j, ch]];
                }
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(3), &[a.view(), b.view()]).expect("channel concat")
}

pub fn split_channels(dy: &Array4<f64>, ca: usize) -> (Array4<f64>, Array4<f64>) {
    let da = dy.slice(ndarray::s![.., .., .., ..ca]).to_owned();
    let db = dy.slice(ndarray::s![.., .., .., ca..]).to_owned();
    (da, db)
}

/// Adds a per-channel bias (used for time-step embeddings).
pub fn add_channel_bias(x: &Array4<f64>, e: &Array1<f64>) -> Array4<f64> {
    let mut y = x.clone();
    y += &e
        .view()
        .insert_axis(Axis(0))
        .insert_axis(Axis(0))
        .insert_axis(Axis(0));
    y
}

pub fn channel_bias_backward(dy: &Array4<f64>) -> Array1<f64> {
    dy.sum_axis(Axis(0)).sum_axis(Axis(0)).sum_axis(Axis(0))
}

/// Single-head cross-attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    /// (d_model, d_attn)
    pub wq: Array2<f64>,
    /// (d_ctx, d_attn)
    pub wk: Array2<f64>,
    /// (d_ctx, d_attn)
    pub wv: Array2<f64>,
    /// (d_attn, d_model)
    pub wo: Array2<f64>,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx_out: Array2<f64>,
}

/// Residual cross-attention over token matrices.
/// `x`: (n, d_model) queries; `g`: (m, d_ctx) key/value tokens.
pub fn cross_attention(
    x: &Array2<f64>,
    g: &Array2<f64>,
    p: &AttnParams,
) -> (Array2<f64>, AttnCache) {
    let dk = p.wq.dim().1;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = x.dot(&p.wq);
    let k = g.dot(&p.wk);
    let v = g.dot(&p.wv);
    let mut scores = q.dot(&k.t());
    scores *= scale;
    // Row-wise stable softmax.
    let mut attn = scores;
    for mut row in attn.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    let ctx_out = attn.dot(&v);
    let y = x + &ctx_out.dot(&p.wo);
    (
        y,
        AttnCache {
            q,
            k,
            v,
            attn,
            ctx_out,
        },
    )
}

/// Gradients of [`cross_attention`]: query input, context tokens, parameters.
pub fn cross_attention_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    g: &Array2<f64>,
    p: &AttnParams,
    cache: &AttnCache,
) -> (Array2<f64>, Array2<f64>, AttnParams) {
    let dk = p.wq.dim().1;
    let scale = 1.0 / (dk as f64).sqrt();

    let dwo = cache.ctx_out.t().dot(dy);
    let d_ctx_out = dy.dot(&p.wo.t());

    let d_attn = d_ctx_out.dot(&cache.v.t());
    let dv = cache.attn.t().dot(&d_ctx_out);

    // Softmax backward row-wise: dS = A * (dA - sum(dA * A)).
    let mut d_scores = d_attn;
    for (mut ds_row, a_row) in d_scores.rows_mut().into_iter().zip(cache.attn.rows()) {
        let dot: f64 = ds_row.iter().zip(a_row.iter()).map(|(d, a)| d * a).sum();
        for (d, a) in ds_row.iter_mut().zip(a_row.iter()) {
            *d = a * (*d - dot);
        }
    }
    d_scores *= scale;

    let dq = d_scores.dot(&cache.k);
    let dkk = d_scores.t().dot(&cache.q);

    let dwq = x.t().dot(&dq);
    let dwk = g.t().dot(&dkk);
    let dwv = g.t().dot(&dv);

    let dx = dy + &dq.dot(&p.wq.t());
    let dg = dkk.dot(&p.wk.t()) + dv.dot(&p.wv.t());

    (
        dx,
        dg,
        AttnParams {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
        },
    )
}
