//! Chunk-parallel evaluation of the linear recurrences (forward only).
//!
//! The sequence is cut into blocks of `chunk` steps. Each block starts from
//! the carried state `S0`, computes its intra-block interactions with dense
//! `chunk x chunk` products, and hands the updated state to the next block.
//! Decay products `prod_{u=s+1..r} a_u` are formed as `exp(L_r - L_s)` from
//! within-block cumulative log gates so no ratio ever exceeds one.
//!
//! For the delta rule the write is re-expressed with pseudo-values
//! `u_t` (`S_t = a_t S_{t-1} + k_t u_t^T`) which satisfy a unit
//! lower-triangular system inside each block, solved by forward substitution.

use super::attention::{gather_head, scatter_head};
use super::linear::Transition;
use super::SeqDims;
use crate::linalg::{gemm, Mat};

fn ln_gate(a: f64) -> f64 {
    a.max(f64::MIN_POSITIVE).ln()
}

/// Returns `(output, final states per (batch, head))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn chunked_scan(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    beta: &[f64],
    dims: SeqDims,
    transition: Transition,
    chunk: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert!(chunk >= 1, "chunk size must be positive");
    let (t_len, dh, heads) = (dims.seq_len, dims.head_dim, dims.heads);
    let mut out = vec![0.0; dims.rows() * dims.width()];
    let mut finals = Vec::with_capacity(dims.batch * heads);
    let mut qh = vec![0.0; t_len * dh];
    let mut kh = vec![0.0; t_len * dh];
    let mut vh = vec![0.0; t_len * dh];
    let mut ah = vec![0.0; t_len * dh];
    let mut oh = vec![0.0; t_len * dh];
    for b in 0..dims.batch {
        for h in 0..heads {
            gather_head(q, dims, b, h, &mut qh);
            gather_head(k, dims, b, h, &mut kh);
            gather_head(v, dims, b, h, &mut vh);
            if let Transition::Diagonal = transition {
                gather_head(alpha, dims, b, h, &mut ah);
            }
            let mut state = vec![0.0; dh * dh];
            let mut start = 0;
            while start < t_len {
                let c = chunk.min(t_len - start);
                let r = start * dh..(start + c) * dh;
                let block = Block {
                    q: &qh[r.clone()],
                    k: &kh[r.clone()],
                    v: &vh[r.clone()],
                    c,
                    dh,
                };
                let o = &mut oh[r.clone()];
                match transition {
                    Transition::Diagonal => diagonal_block(&block, &ah[r], &mut state, o),
                    Transition::Delta { beta_on_write } => {
                        let rows = (start..start + c).map(|t| (b * t_len + t) * heads + h);
                        let (a, bt): (Vec<f64>, Vec<f64>) =
                            rows.map(|i| (alpha[i], beta[i])).unzip();
                        delta_block(&block, &a, &bt, beta_on_write, &mut state, o);
                    }
                }
                start += c;
            }
            scatter_head(&oh, dims, b, h, &mut out);
            finals.push(state);
        }
    }
    (out, finals)
}

struct Block<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    c: usize,
    dh: usize,
}

fn diagonal_block(blk: &Block<'_>, alpha: &[f64], state: &mut [f64], out: &mut [f64]) {
    let (c, dh) = (blk.c, blk.dh);
    // Cumulative log decay per channel.
    let mut logcum = vec![0.0; c * dh];
    for r in 0..c {
        for i in 0..dh {
            let prev = if r == 0 { 0.0 } else { logcum[(r - 1) * dh + i] };
            logcum[r * dh + i] = prev + ln_gate(alpha[r * dh + i]);
        }
    }
    // Inter-block: (Q * exp(L)) S0
    let qdec: Vec<f64> = blk.q.iter().zip(&logcum).map(|(q, l)| q * l.exp()).collect();
    gemm(Mat::new(&qdec, c, dh), Mat::new(state, dh, dh), out, 0.0);
    // Intra-block: P V, P[r,s] = sum_i q_ri k_si exp(L_ri - L_si), s <= r
    let mut p = vec![0.0; c * c];
    for r in 0..c {
        for s in 0..=r {
            p[r * c + s] = (0..dh)
                .map(|i| {
                    blk.q[r * dh + i] * blk.k[s * dh + i] * (logcum[r * dh + i] - logcum[s * dh + i]).exp()
                })
                .sum();
        }
    }
    gemm(Mat::new(&p, c, c), Mat::new(blk.v, c, dh), out, 1.0);
    // Carry: diag(exp(L_last)) S0 + (K * exp(L_last - L))^T V
    let last = &logcum[(c - 1) * dh..c * dh];
    for i in 0..dh {
        let d = last[i].exp();
        state[i * dh..(i + 1) * dh].iter_mut().for_each(|x| *x *= d);
    }
    let kdec: Vec<f64> = (0..c * dh)
        .map(|idx| blk.k[idx] * (last[idx % dh] - logcum[idx]).exp())
        .collect();
    gemm(Mat::new(&kdec, c, dh).t(), Mat::new(blk.v, c, dh), state, 1.0);
}

fn delta_block(
    blk: &Block<'_>,
    alpha: &[f64],
    beta: &[f64],
    beta_on_write: bool,
    state: &mut [f64],
    out: &mut [f64],
) {
    let (c, dh) = (blk.c, blk.dh);
    let mut logcum = vec![0.0; c];
    for r in 0..c {
        logcum[r] = if r == 0 { 0.0 } else { logcum[r - 1] } + ln_gate(alpha[r]);
    }
    let mut kk = vec![0.0; c * c];
    gemm(Mat::new(blk.k, c, dh), Mat::new(blk.k, c, dh).t(), &mut kk, 0.0);
    let mut qk = vec![0.0; c * c];
    gemm(Mat::new(blk.q, c, dh), Mat::new(blk.k, c, dh).t(), &mut qk, 0.0);
    // K S0 : row r holds S0^T k_r
    let mut ks0 = vec![0.0; c * dh];
    gemm(Mat::new(blk.k, c, dh), Mat::new(state, dh, dh), &mut ks0, 0.0);
    // Pseudo-values: u_r = w_r v_r - b_r g_r S0^T k_r - b_r sum_{s<r} (g_r/g_s)(k_s.k_r) u_s
    let mut u = vec![0.0; c * dh];
    for r in 0..c {
        let w = if beta_on_write { beta[r] } else { 1.0 };
        let g = logcum[r].exp();
        for j in 0..dh {
            u[r * dh + j] = w * blk.v[r * dh + j] - beta[r] * g * ks0[r * dh + j];
        }
        for s in 0..r {
            let a = beta[r] * (logcum[r] - logcum[s]).exp() * kk[r * c + s];
            if a != 0.0 {
                let (head, tail) = u.split_at_mut(r * dh);
                let us = &head[s * dh..(s + 1) * dh];
                tail[..dh].iter_mut().zip(us).for_each(|(x, y)| *x -= a * y);
            }
        }
    }
    // O = diag(g) Q S0 + M U, M[r,s] = exp(L_r - L_s) q_r.k_s for s <= r
    let qdec: Vec<f64> = (0..c * dh).map(|idx| blk.q[idx] * logcum[idx / dh].exp()).collect();
    gemm(Mat::new(&qdec, c, dh), Mat::new(state, dh, dh), out, 0.0);
    let mut m = vec![0.0; c * c];
    for r in 0..c {
        for s in 0..=r {
            m[r * c + s] = (logcum[r] - logcum[s]).exp() * qk[r * c + s];
        }
    }
    gemm(Mat::new(&m, c, c), Mat::new(&u, c, dh), out, 1.0);
    // S_new = g_last S0 + sum_s exp(L_last - L_s) k_s u_s^T
    let last = logcum[c - 1];
    let d = last.exp();
    state.iter_mut().for_each(|x| *x *= d);
    let kdec: Vec<f64> = (0..c * dh)
        .map(|idx| blk.k[idx] * (last - logcum[idx / dh]).exp())
        .collect();
    gemm(Mat::new(&kdec, c, dh).t(), Mat::new(&u, c, dh), state, 1.0);
}
