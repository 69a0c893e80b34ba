//! Sequential linear-attention recurrences with hand-derived backward passes.
//!
//! State layout per head: `S` is `d_k x d_v` row-major, read as
//! `o_t = S_t^T q_t`.
//!
//! * GLA: `S_t = diag(a_t) S_{t-1} + k_t v_t^T`
//! * Gated DeltaNet: `S_t = a_t (I - b_t k_t k_t^T) S_{t-1} + w_t k_t v_t^T`,
//!   with `w_t = b_t` (standard) or `w_t = 1` (simplified write).

use super::attention::{gather_head, scatter_head};
use super::SeqDims;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-token gate layout of a scan.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Transition {
    /// Elementwise decay with one value per key channel.
    Diagonal,
    /// Scalar decay and write strength per head.
    Delta { beta_on_write: bool },
}

pub(crate) struct ScanOutput {
    pub out: Vec<f64>,
    /// `S_t` after every step, `(batch, head, t)` major.
    pub states: Vec<f64>,
}

impl ScanOutput {
    pub fn final_state(&self, dims: SeqDims, b: usize, h: usize) -> &[f64] {
        let n = dims.head_dim * dims.head_dim;
        let t = dims.seq_len;
        &self.states[((b * dims.heads + h) * t + t - 1) * n..][..n]
    }
}

/// Runs the recurrence. `alpha` is `rows x width` for the diagonal transition
/// and `rows x heads` for the delta transition; `beta` is `rows x heads` and
/// ignored for the diagonal transition.
pub(crate) fn scan(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    beta: &[f64],
    dims: SeqDims,
    transition: Transition,
) -> ScanOutput {
    let (t_len, dh, heads) = (dims.seq_len, dims.head_dim, dims.heads);
    let n = dh * dh;
    let mut out = vec![0.0; dims.rows() * dims.width()];
    let mut states = vec![0.0; dims.batch * heads * t_len * n];
    let (mut qh, mut kh, mut vh, mut oh) = (
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
    );
    let mut ah = vec![0.0; t_len * dh];
    let mut s = vec![0.0; n];
    let mut ks = vec![0.0; dh];
    for b in 0..dims.batch {
        for h in 0..heads {
            gather_head(q, dims, b, h, &mut qh);
            gather_head(k, dims, b, h, &mut kh);
            gather_head(v, dims, b, h, &mut vh);
            if let Transition::Diagonal = transition {
                gather_head(alpha, dims, b, h, &mut ah);
            }
            s.iter_mut().for_each(|x| *x = 0.0);
            for t in 0..t_len {
                let row = b * t_len + t;
                let (qt, kt, vt) = (
                    &qh[t * dh..(t + 1) * dh],
                    &kh[t * dh..(t + 1) * dh],
                    &vh[t * dh..(t + 1) * dh],
                );
                match transition {
                    Transition::Diagonal => {
                        let at = &ah[t * dh..(t + 1) * dh];
                        for i in 0..dh {
                            let (a, ki) = (at[i], kt[i]);
                            for (sij, &vj) in s[i * dh..(i + 1) * dh].iter_mut().zip(vt) {
                                *sij = a * *sij + ki * vj;
                            }
                        }
                    }
                    Transition::Delta { beta_on_write } => {
                        let a = alpha[row * heads + h];
                        let bt = beta[row * heads + h];
                        let w = if beta_on_write { bt } else { 1.0 };
                        ks.iter_mut().for_each(|x| *x = 0.0);
                        for i in 0..dh {
                            let ki = kt[i];
                            for (acc, &sij) in ks.iter_mut().zip(&s[i * dh..(i + 1) * dh]) {
                                *acc += ki * sij;
                            }
                        }
                        for i in 0..dh {
                            let ki = kt[i];
                            for ((sij, &kj), &vj) in
                                s[i * dh..(i + 1) * dh].iter_mut().zip(&ks).zip(vt)
                            {
                                *sij = a * (*sij - bt * ki * kj) + w * ki * vj;
                            }
                        }
                    }
                }
                let ot = &mut oh[t * dh..(t + 1) * dh];
                ot.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..dh {
                    let qi = qt[i];
                    for (o, &sij) in ot.iter_mut().zip(&s[i * dh..(i + 1) * dh]) {
                        *o += qi * sij;
                    }
                }
                states[((b * heads + h) * t_len + t) * n..][..n].copy_from_slice(&s);
            }
            scatter_head(&oh, dims, b, h, &mut out);
        }
    }
    ScanOutput { out, states }
}

struct ScanGrads {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    beta: &[f64],
    states: &[f64],
    grad_out: &[f64],
    dims: SeqDims,
    transition: Transition,
) -> ScanGrads {
    let (t_len, dh, heads) = (dims.seq_len, dims.head_dim, dims.heads);
    let n = dh * dh;
    let size = dims.rows() * dims.width();
    let mut g = ScanGrads {
        q: vec![0.0; size],
        k: vec![0.0; size],
        v: vec![0.0; size],
        alpha: vec![0.0; alpha.len()],
        beta: vec![0.0; beta.len()],
    };
    let zeros = vec![0.0; n];
    let mut buf = [
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
    ];
    let (mut dqh, mut dkh, mut dvh, mut dah) = (
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
        vec![0.0; t_len * dh],
    );
    let mut gs = vec![0.0; n];
    let (mut gk, mut u) = (vec![0.0; dh], vec![0.0; dh]);
    for b in 0..dims.batch {
        for h in 0..heads {
            let [qh, kh, vh, doh, ah] = &mut buf;
            gather_head(q, dims, b, h, qh);
            gather_head(k, dims, b, h, kh);
            gather_head(v, dims, b, h, vh);
            gather_head(grad_out, dims, b, h, doh);
            if let Transition::Diagonal = transition {
                gather_head(alpha, dims, b, h, ah);
            }
            gs.iter_mut().for_each(|x| *x = 0.0);
            let base = (b * heads + h) * t_len;
            for t in (0..t_len).rev() {
                let row = b * t_len + t;
                let st = &states[(base + t) * n..][..n];
                let prev = if t == 0 { &zeros[..] } else { &states[(base + t - 1) * n..][..n] };
                let r = t * dh..(t + 1) * dh;
                let (qt, kt, vt, dot) = (&qh[r.clone()], &kh[r.clone()], &vh[r.clone()], &doh[r.clone()]);
                // Output read: o = S^T q.
                for i in 0..dh {
                    let qi = qt[i];
                    let srow = &st[i * dh..(i + 1) * dh];
                    dqh[t * dh + i] = srow.iter().zip(dot).map(|(a, b)| a * b).sum();
                    for (gij, &dj) in gs[i * dh..(i + 1) * dh].iter_mut().zip(dot) {
                        *gij += qi * dj;
                    }
                }
                // gk = G^T k
                gk.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..dh {
                    let ki = kt[i];
                    for (acc, &gij) in gk.iter_mut().zip(&gs[i * dh..(i + 1) * dh]) {
                        *acc += ki * gij;
                    }
                }
                match transition {
                    Transition::Diagonal => {
                        let at = &ah[r.clone()];
                        for i in 0..dh {
                            let grow = &gs[i * dh..(i + 1) * dh];
                            dkh[t * dh + i] = grow.iter().zip(vt).map(|(a, b)| a * b).sum();
                            dah[t * dh + i] = grow
                                .iter()
                                .zip(&prev[i * dh..(i + 1) * dh])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                        dvh[r.clone()].copy_from_slice(&gk);
                        for i in 0..dh {
                            let a = at[i];
                            gs[i * dh..(i + 1) * dh].iter_mut().for_each(|x| *x *= a);
                        }
                    }
                    Transition::Delta { beta_on_write } => {
                        let a = alpha[row * heads + h];
                        let bt = beta[row * heads + h];
                        let w = if beta_on_write { bt } else { 1.0 };
                        // u = S_{t-1}^T k
                        u.iter_mut().for_each(|x| *x = 0.0);
                        for i in 0..dh {
                            let ki = kt[i];
                            for (acc, &sij) in u.iter_mut().zip(&prev[i * dh..(i + 1) * dh]) {
                                *acc += ki * sij;
                            }
                        }
                        let gu: f64 = gk.iter().zip(&u).map(|(a, b)| a * b).sum();
                        let gv: f64 = gk.iter().zip(vt).map(|(a, b)| a * b).sum();
                        let gsum: f64 = gs.iter().zip(prev).map(|(a, b)| a * b).sum();
                        g.alpha[row * heads + h] = gsum - bt * gu;
                        g.beta[row * heads + h] =
                            -a * gu + if beta_on_write { gv } else { 0.0 };
                        for j in 0..dh {
                            dvh[t * dh + j] = w * gk[j];
                        }
                        for i in 0..dh {
                            let grow = &gs[i * dh..(i + 1) * dh];
                            let prow = &prev[i * dh..(i + 1) * dh];
                            let g_u: f64 = grow.iter().zip(&u).map(|(a, b)| a * b).sum();
                            let s_g: f64 = prow.iter().zip(&gk).map(|(a, b)| a * b).sum();
                            let g_v: f64 = grow.iter().zip(vt).map(|(a, b)| a * b).sum();
                            dkh[t * dh + i] = -a * bt * (g_u + s_g) + w * g_v;
                        }
                        // G <- a (G - b k gk^T)
                        for i in 0..dh {
                            let ki = kt[i];
                            for (gij, &gj) in gs[i * dh..(i + 1) * dh].iter_mut().zip(&gk) {
                                *gij = a * (*gij - bt * ki * gj);
                            }
                        }
                    }
                }
            }
            scatter_head(&dqh, dims, b, h, &mut g.q);
            scatter_head(&dkh, dims, b, h, &mut g.k);
            scatter_head(&dvh, dims, b, h, &mut g.v);
            if let Transition::Diagonal = transition {
                scatter_head(&dah, dims, b, h, &mut g.alpha);
            }
        }
    }
    g
}

fn check(op: &'static str, v: &Var<'_>, expect: [usize; 2]) -> Result<()> {
    let shape = v.shape();
    if shape != expect {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: expect.to_vec(),
        });
    }
    Ok(())
}

/// Gated linear attention scan; `alpha` is `rows x width` in `(0, 1)`.
pub(crate) fn gla_scan<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    alpha: &Var<'t>,
    dims: SeqDims,
) -> Result<Var<'t>> {
    let full = [dims.rows(), dims.width()];
    for x in [q, k, v, alpha] {
        check("gla_scan", x, full)?;
    }
    let (qv, kv, vv, av) = (q.value(), k.value(), v.value(), alpha.value());
    let res = scan(qv.data(), kv.data(), vv.data(), av.data(), &[], dims, Transition::Diagonal);
    let states = res.states;
    q.tape().custom(
        "gla_scan",
        &[*q, *k, *v, *alpha],
        Tensor::from_parts(full.to_vec(), res.out),
        Box::new(move |ctx| {
            let i = &ctx.inputs;
            let g = scan_backward(
                i[0].data(),
                i[1].data(),
                i[2].data(),
                i[3].data(),
                &[],
                &states,
                ctx.grad,
                dims,
                Transition::Diagonal,
            );
            vec![Some(g.q), Some(g.k), Some(g.v), Some(g.alpha)]
        }),
    )
}

/// Gated delta-rule scan; `alpha` and `beta` are `rows x heads` in `(0, 1)`.
/// Keys are expected to be L2-normalised per head already.
pub(crate) fn gdn_scan<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    alpha: &Var<'t>,
    beta: &Var<'t>,
    dims: SeqDims,
    beta_on_write: bool,
) -> Result<Var<'t>> {
    let full = [dims.rows(), dims.width()];
    for x in [q, k, v] {
        check("gdn_scan", x, full)?;
    }
    for x in [alpha, beta] {
        check("gdn_scan", x, [dims.rows(), dims.heads])?;
    }
    let transition = Transition::Delta { beta_on_write };
    let (qv, kv, vv, av, bv) = (q.value(), k.value(), v.value(), alpha.value(), beta.value());
    let res = scan(qv.data(), kv.data(), vv.data(), av.data(), bv.data(), dims, transition);
    let states = res.states;
    q.tape().custom(
        "gdn_scan",
        &[*q, *k, *v, *alpha, *beta],
        Tensor::from_parts(full.to_vec(), res.out),
        Box::new(move |ctx| {
            let i = &ctx.inputs;
            let g = scan_backward(
                i[0].data(),
                i[1].data(),
                i[2].data(),
                i[3].data(),
                i[4].data(),
                &states,
                ctx.grad,
                dims,
                transition,
            );
            vec![Some(g.q), Some(g.k), Some(g.v), Some(g.alpha), Some(g.beta)]
        }),
    )
}
