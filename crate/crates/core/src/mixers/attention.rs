//! Causal (optionally windowed) softmax attention and rotary embeddings as
//! fused tape ops.

use super::SeqDims;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::Tensor;

fn check_layout(op: &'static str, v: &Var<'_>, dims: SeqDims) -> Result<()> {
    let shape = v.shape();
    if shape != [dims.rows(), dims.width()] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![dims.rows(), dims.width()],
        });
    }
    Ok(())
}

/// Copies head `h` of sequence `b` into a contiguous `T x d_h` buffer.
pub(crate) fn gather_head(x: &[f64], dims: SeqDims, b: usize, h: usize, out: &mut [f64]) {
    let (t, dh, w) = (dims.seq_len, dims.head_dim, dims.width());
    for i in 0..t {
        let src = (b * t + i) * w + h * dh;
        out[i * dh..(i + 1) * dh].copy_from_slice(&x[src..src + dh]);
    }
}

pub(crate) fn scatter_head(buf: &[f64], dims: SeqDims, b: usize, h: usize, x: &mut [f64]) {
    let (t, dh, w) = (dims.seq_len, dims.head_dim, dims.width());
    for i in 0..t {
        let dst = (b * t + i) * w + h * dh;
        x[dst..dst + dh].copy_from_slice(&buf[i * dh..(i + 1) * dh]);
    }
}

/// Position `j` is visible from `i` when `j <= i` and, with a window `w`,
/// `j >= i - w`: the current position plus the `w` before it.
pub(crate) fn visible(i: usize, j: usize, window: Option<usize>) -> bool {
    j <= i && window.is_none_or(|w| i - j <= w)
}

/// Multi-head causal softmax attention over `(batch * seq_len) x (heads *
/// head_dim)` inputs, logits scaled by `1/sqrt(head_dim)`.
pub(crate) fn causal_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    dims: SeqDims,
    window: Option<usize>,
) -> Result<Var<'t>> {
    for x in [q, k, v] {
        check_layout("causal_attention", x, dims)?;
    }
    let (t, dh) = (dims.seq_len, dims.head_dim);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let mut out = vec![0.0; dims.rows() * dims.width()];
    // Attention weights per (batch, head), kept for backward.
    let mut probs = vec![0.0; dims.batch * dims.heads * t * t];
    let mut qh = vec![0.0; t * dh];
    let mut kh = vec![0.0; t * dh];
    let mut vh = vec![0.0; t * dh];
    let mut oh = vec![0.0; t * dh];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            gather_head(qv.data(), dims, b, h, &mut qh);
            gather_head(kv.data(), dims, b, h, &mut kh);
            gather_head(vv.data(), dims, b, h, &mut vh);
            let p = &mut probs[(b * dims.heads + h) * t * t..][..t * t];
            gemm(Mat::new(&qh, t, dh), Mat::new(&kh, t, dh).t(), p, 0.0);
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    if visible(i, j, window) {
                        *s *= scale;
                        max = max.max(*s);
                    }
                }
                let mut sum = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if visible(i, j, window) { (*s - max).exp() } else { 0.0 };
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            gemm(Mat::new(p, t, t), Mat::new(&vh, t, dh), &mut oh, 0.0);
            scatter_head(&oh, dims, b, h, &mut out);
        }
    }
    let value = Tensor::from_parts(vec![dims.rows(), dims.width()], out);
    q.tape().custom(
        "causal_attention",
        &[*q, *k, *v],
        value,
        Box::new(move |ctx| {
            let n = dims.rows() * dims.width();
            let (mut gq, mut gk, mut gv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let mut qh = vec![0.0; t * dh];
            let mut kh = vec![0.0; t * dh];
            let mut vh = vec![0.0; t * dh];
            let mut goh = vec![0.0; t * dh];
            let mut dp = vec![0.0; t * t];
            let mut buf = vec![0.0; t * dh];
            for b in 0..dims.batch {
                for h in 0..dims.heads {
                    let p = &probs[(b * dims.heads + h) * t * t..][..t * t];
                    gather_head(ctx.inputs[0].data(), dims, b, h, &mut qh);
                    gather_head(ctx.inputs[1].data(), dims, b, h, &mut kh);
                    gather_head(ctx.inputs[2].data(), dims, b, h, &mut vh);
                    gather_head(ctx.grad, dims, b, h, &mut goh);
                    // dV = P^T dO
                    gemm(Mat::new(p, t, t).t(), Mat::new(&goh, t, dh), &mut buf, 0.0);
                    scatter_head(&buf, dims, b, h, &mut gv);
                    // dP = dO V^T ; dS = P * (dP - rowsum(dP * P)) * scale
                    gemm(Mat::new(&goh, t, dh), Mat::new(&vh, t, dh).t(), &mut dp, 0.0);
                    for i in 0..t {
                        let pr = &p[i * t..(i + 1) * t];
                        let dr = &mut dp[i * t..(i + 1) * t];
                        let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        dr.iter_mut()
                            .zip(pr)
                            .for_each(|(d, &pp)| *d = pp * (*d - s) * scale);
                    }
                    gemm(Mat::new(&dp, t, t), Mat::new(&kh, t, dh), &mut buf, 0.0);
                    scatter_head(&buf, dims, b, h, &mut gq);
                    gemm(Mat::new(&dp, t, t).t(), Mat::new(&qh, t, dh), &mut buf, 0.0);
                    scatter_head(&buf, dims, b, h, &mut gk);
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    )
}

/// Rotary position embedding tables for positions `0..seq_len`.
fn rope_tables(seq_len: usize, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = vec![0.0; seq_len * half];
    let mut sin = vec![0.0; seq_len * half];
    for p in 0..seq_len {
        for i in 0..half {
            let theta = p as f64 / base.powf(2.0 * i as f64 / head_dim as f64);
            cos[p * half + i] = theta.cos();
            sin[p * half + i] = theta.sin();
        }
    }
    (cos, sin)
}

/// Rotates pairs `(i, i + head_dim/2)` of every head by a position-dependent
/// angle. `sign = -1` applies the inverse rotation.
fn rotate(x: &[f64], dims: SeqDims, cos: &[f64], sin: &[f64], sign: f64) -> Vec<f64> {
    let (t, dh, w) = (dims.seq_len, dims.head_dim, dims.width());
    let half = dh / 2;
    let mut out = x.to_vec();
    for r in 0..dims.rows() {
        let pos = r % t;
        for h in 0..dims.heads {
            let base = r * w + h * dh;
            for i in 0..half {
                let (c, s) = (cos[pos * half + i], sign * sin[pos * half + i]);
                let (a, b) = (x[base + i], x[base + i + half]);
                out[base + i] = a * c - b * s;
                out[base + i + half] = a * s + b * c;
            }
        }
    }
    out
}

pub(crate) fn rope<'t>(x: &Var<'t>, dims: SeqDims, base: f64) -> Result<Var<'t>> {
    check_layout("rope", x, dims)?;
    if dims.head_dim % 2 != 0 {
        return Err(crate::error::invalid("rotary embedding needs an even head width"));
    }
    let (cos, sin) = rope_tables(dims.seq_len, dims.head_dim, base);
    let out = rotate(x.value().data(), dims, &cos, &sin, 1.0);
    x.tape().custom(
        "rope",
        &[*x],
        Tensor::from_parts(x.shape(), out),
        Box::new(move |ctx| vec![Some(rotate(ctx.grad, dims, &cos, &sin, -1.0))]),
    )
}
