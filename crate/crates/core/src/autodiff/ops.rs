//! Differentiable primitives. Every op checks shapes up front and fails with
//! both shapes on mismatch; there is no implicit broadcasting beyond the
//! explicit row ops (`add_row`, `mul_row`) and scalars.

use std::ops::Range;

use super::{BackwardCtx, Var};
use crate::error::{invalid, Error, Result};
use crate::linalg::{gemm, matmul, Mat};
use crate::tensor::Tensor;

/// Additive surrogate for a masked logit.
pub const MASK_NEG: f64 = -1e30;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(mismatch(op, shape, &[0, 0])),
    }
}

fn map_unary(x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    x.iter().map(|&v| f(v)).collect()
}

fn row_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Log-softmax of a row, written into `out`.
pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    out.iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
}

fn softmax_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .chunks(cols)
        .zip(g.chunks(cols))
        .zip(dx.chunks_mut(cols))
    {
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yy * (gg - s);
        }
    }
    dx
}

impl<'t> Var<'t> {
    fn unary(
        &self,
        name: &'static str,
        data: Vec<f64>,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<f64> + 'static,
    ) -> Result<Var<'t>> {
        let value = Tensor::from_parts(self.shape(), data);
        self.tape
            .custom(name, &[*self], value, Box::new(move |ctx| vec![Some(backward(ctx))]))
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(mismatch(op, &a, &b));
        }
        Ok(a)
    }

    fn binary_elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var<'t>> {
        let shape = self.same_shape(other, name)?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.custom(
            name,
            &[*self, *other],
            Tensor::from_parts(shape, data),
            Box::new(backward),
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "add", |a, b| a + b, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "sub", |a, b| a - b, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(map_unary(ctx.grad, |g| -g))]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "mul", |a, b| a * b, |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs[0]
                .then(|| ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect());
            let gb = ctx.needs[1]
                .then(|| ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let data = map_unary(self.value().data(), |v| v * c);
        self.unary("scale", data, move |ctx| map_unary(ctx.grad, |g| g * c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let data = map_unary(self.value().data(), |v| v + c);
        self.unary("add_scalar", data, |ctx| ctx.grad.to_vec())
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let data = map_unary(self.value().data(), f64::exp);
        self.unary("exp", data, |ctx| {
            ctx.grad.iter().zip(ctx.output.data()).map(|(g, y)| g * y).collect()
        })
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let data = map_unary(self.value().data(), f64::ln);
        self.unary("log", data, |ctx| {
            ctx.grad.iter().zip(ctx.inputs[0].data()).map(|(g, x)| g / x).collect()
        })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let data = map_unary(self.value().data(), sigmoid);
        self.unary("sigmoid", data, |ctx| {
            ctx.grad
                .iter()
                .zip(ctx.output.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect()
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Var<'t>> {
        let data = map_unary(self.value().data(), |x| x * sigmoid(x));
        self.unary("silu", data, |ctx| {
            ctx.grad
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect()
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        self.tape.custom(
            "reshape",
            &[*self],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// `(m x k) @ (k x n)`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k) = dims2("matmul", &sa)?;
        let (k2, n) = dims2("matmul", &sb)?;
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (a, b) = (self.value(), other.value());
        let out = matmul(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n));
        self.tape.custom(
            "matmul",
            &[*self, *other],
            Tensor::from_parts(vec![m, n], out),
            Box::new(move |ctx| {
                let g = Mat::new(ctx.grad, m, n);
                let ga = ctx.needs[0]
                    .then(|| matmul(g, Mat::new(ctx.inputs[1].data(), k, n).t()));
                let gb = ctx.needs[1]
                    .then(|| matmul(Mat::new(ctx.inputs[0].data(), m, k).t(), g));
                vec![ga, gb]
            }),
        )
    }

    /// `(b x m x k) @ (b x k x n)`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (bs, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            _ => return Err(mismatch("bmm", &sa, &sb)),
        };
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                Mat::new(&a.data()[i * m * k..], m, k),
                Mat::new(&b.data()[i * k * n..], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.tape.custom(
            "bmm",
            &[*self, *other],
            Tensor::from_parts(vec![bs, m, n], out),
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = ctx.needs[0].then(|| vec![0.0; bs * m * k]);
                let mut gb = ctx.needs[1].then(|| vec![0.0; bs * k * n]);
                for i in 0..bs {
                    let g = Mat::new(&ctx.grad[i * m * n..], m, n);
                    if let Some(ga) = &mut ga {
                        let bm = Mat::new(&b[i * k * n..], k, n).t();
                        gemm(g, bm, &mut ga[i * m * k..(i + 1) * m * k], 0.0);
                    }
                    if let Some(gb) = &mut gb {
                        let am = Mat::new(&a[i * m * k..], m, k).t();
                        gemm(am, g, &mut gb[i * k * n..(i + 1) * k * n], 0.0);
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (m, n) = dims2("transpose", &shape)?;
        let data = transpose(self.value().data(), m, n);
        self.tape.custom(
            "transpose",
            &[*self],
            Tensor::from_parts(vec![n, m], data),
            Box::new(move |ctx| vec![Some(transpose(ctx.grad, n, m))]),
        )
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (sx, sb) = (self.shape(), bias.shape());
        let (m, n) = dims2("add_row", &sx)?;
        if sb != [n] {
            return Err(mismatch("add_row", &sx, &sb));
        }
        let (x, b) = (self.value(), bias.value());
        let mut data = x.data().to_vec();
        data.chunks_mut(n)
            .for_each(|r| r.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb));
        self.tape.custom(
            "add_row",
            &[*self, *bias],
            Tensor::from_parts(vec![m, n], data),
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| column_sums(ctx.grad, n));
                vec![Some(ctx.grad.to_vec()), gb]
            }),
        )
    }

    /// Multiplies every row of an `m x n` matrix by a length-`n` vector.
    pub fn mul_row(&self, scale: &Var<'t>) -> Result<Var<'t>> {
        let (sx, ss) = (self.shape(), scale.shape());
        let (m, n) = dims2("mul_row", &sx)?;
        if ss != [n] {
            return Err(mismatch("mul_row", &sx, &ss));
        }
        let (x, s) = (self.value(), scale.value());
        let mut data = x.data().to_vec();
        data.chunks_mut(n)
            .for_each(|r| r.iter_mut().zip(s.data()).for_each(|(v, ss)| *v *= ss));
        self.tape.custom(
            "mul_row",
            &[*self, *scale],
            Tensor::from_parts(vec![m, n], data),
            Box::new(move |ctx| {
                let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs[0].then(|| {
                    let mut gx = ctx.grad.to_vec();
                    gx.chunks_mut(n)
                        .for_each(|r| r.iter_mut().zip(s).for_each(|(v, ss)| *v *= ss));
                    gx
                });
                let gs = ctx.needs[1].then(|| {
                    let prod: Vec<f64> = ctx.grad.iter().zip(x).map(|(g, v)| g * v).collect();
                    column_sums(&prod, n)
                });
                vec![gx, gs]
            }),
        )
    }

    /// Softmax over the last axis of a 2-D var.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, n) = dims2("softmax_rows", &shape)?;
        let mut data = self.value().data().to_vec();
        data.chunks_mut(n).for_each(row_softmax_in_place);
        self.unary("softmax_rows", data, move |ctx| {
            softmax_backward(ctx.output.data(), ctx.grad, n)
        })
    }

    /// Softmax over rows with `keep[i] == false` entries forced to probability
    /// zero via an additive `-1e30` logit. Every row must keep at least one entry.
    pub fn masked_softmax_rows(&self, keep: &[bool]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, n) = dims2("masked_softmax_rows", &shape)?;
        if keep.len() != self.value().numel() {
            return Err(mismatch("masked_softmax_rows", &shape, &[keep.len()]));
        }
        if keep.chunks(n).any(|r| !r.iter().any(|&k| k)) {
            return Err(invalid("masked_softmax_rows: a row masks every entry"));
        }
        let mut data: Vec<f64> = self
            .value()
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { v + MASK_NEG })
            .collect();
        data.chunks_mut(n).for_each(row_softmax_in_place);
        self.unary("masked_softmax_rows", data, move |ctx| {
            softmax_backward(ctx.output.data(), ctx.grad, n)
        })
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        let n = self.value().numel();
        self.tape.custom(
            "sum_all",
            &[*self],
            Tensor::scalar(s),
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Sum of a 2-D var over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (m, n) = dims2("sum_axis", &shape)?;
        let x = self.value();
        let (data, out_shape) = match axis {
            0 => (column_sums(x.data(), n), vec![n]),
            1 => (x.data().chunks(n).map(|r| r.iter().sum()).collect(), vec![m]),
            _ => return Err(invalid(format!("sum_axis: axis {axis} on 2-D var"))),
        };
        self.tape.custom(
            "sum_axis",
            &[*self],
            Tensor::from_parts(out_shape, data),
            Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                for (i, row) in g.chunks_mut(n).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if axis == 0 { ctx.grad[j] } else { ctx.grad[i] };
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (m, n) = dims2("mean_axis", &shape)?;
        let count = if axis == 0 { m } else { n };
        self.sum_axis(axis)?.scale(1.0 / count as f64)
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (m, n) = dims2("slice_rows", &shape)?;
        if range.start >= range.end || range.end > m {
            return Err(mismatch("slice_rows", &shape, &[range.start, range.end]));
        }
        let data = self.value().data()[range.start * n..range.end * n].to_vec();
        let rows = range.len();
        self.tape.custom(
            "slice_rows",
            &[*self],
            Tensor::from_parts(vec![rows, n], data),
            Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                g[range.start * n..range.end * n].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (m, n) = dims2("slice_cols", &shape)?;
        if range.start >= range.end || range.end > n {
            return Err(mismatch("slice_cols", &shape, &[range.start, range.end]));
        }
        let w = range.len();
        let x = self.value();
        let data: Vec<f64> = x.data().chunks(n).flat_map(|r| r[range.clone()].to_vec()).collect();
        self.tape.custom(
            "slice_cols",
            &[*self],
            Tensor::from_parts(vec![m, w], data),
            Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                for (dst, src) in g.chunks_mut(n).zip(ctx.grad.chunks(w)) {
                    dst[range.clone()].copy_from_slice(src);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates 2-D vars along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero vars"))?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(Var::shape).collect();
        for s in &shapes {
            dims2("concat", s)?;
            let other = if axis == 0 { s[1] != shapes[0][1] } else { s[0] != shapes[0][0] };
            if other || axis > 1 {
                return Err(mismatch("concat", &shapes[0], s));
            }
        }
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let (data, out_shape) = if axis == 0 {
            let rows = shapes.iter().map(|s| s[0]).sum();
            let data = values.iter().flat_map(|v| v.data().to_vec()).collect();
            (data, vec![rows, shapes[0][1]])
        } else {
            let m = shapes[0][0];
            let total: usize = shapes.iter().map(|s| s[1]).sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for v in &values {
                    data.extend_from_slice(v.row(i));
                }
            }
            (data, vec![m, total])
        };
        let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let rows: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
        first.tape.custom(
            "concat",
            parts,
            Tensor::from_parts(out_shape, data),
            Box::new(move |ctx| {
                if axis == 0 {
                    let mut off = 0;
                    rows.iter()
                        .zip(&widths)
                        .map(|(&r, &w)| {
                            let g = ctx.grad[off..off + r * w].to_vec();
                            off += r * w;
                            Some(g)
                        })
                        .collect()
                } else {
                    let total: usize = widths.iter().sum();
                    let m = rows[0];
                    let mut col = 0;
                    widths
                        .iter()
                        .map(|&w| {
                            let g = (0..m)
                                .flat_map(|i| ctx.grad[i * total + col..i * total + col + w].to_vec())
                                .collect();
                            col += w;
                            Some(g)
                        })
                        .collect()
                }
            }),
        )
    }

    /// Gathers rows of a `V x d` table.
    pub fn embedding(table: &Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let shape = table.shape();
        let (vocab, d) = dims2("embedding", &shape)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        if ids.is_empty() {
            return Err(invalid("embedding of zero ids"));
        }
        let t = table.value();
        let data: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        let ids = ids.to_vec();
        table.tape.custom(
            "embedding",
            &[*table],
            Tensor::from_parts(vec![ids.len(), d], data),
            Box::new(move |ctx| {
                let mut g = vec![0.0; vocab * d];
                for (r, &i) in ids.iter().enumerate() {
                    let src = &ctx.grad[r * d..(r + 1) * d];
                    g[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                vec![Some(g)]
            }),
        )
    }

    /// `a b^T` for 1-D `a` (length m) and `b` (length n).
    pub fn outer(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (m, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m], &[n]) => (m, n),
            _ => return Err(mismatch("outer", &sa, &sb)),
        };
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().flat_map(|x| b.data().iter().map(move |y| x * y)).collect();
        self.tape.custom(
            "outer",
            &[*self, *other],
            Tensor::from_parts(vec![m, n], data),
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let ga = ctx.needs[0]
                    .then(|| (0..m).map(|i| (0..n).map(|j| g[i * n + j] * b[j]).sum()).collect());
                let gb = ctx.needs[1]
                    .then(|| (0..n).map(|j| (0..m).map(|i| g[i * n + j] * a[i]).sum()).collect());
                vec![ga, gb]
            }),
        )
    }

    /// Sum of squared entries.
    pub fn sq_l2(&self) -> Result<Var<'t>> {
        let s = self.value().sq_norm();
        self.tape.custom(
            "sq_l2",
            &[*self],
            Tensor::scalar(s),
            Box::new(|ctx| {
                let g = ctx.grad[0];
                vec![Some(ctx.inputs[0].data().iter().map(|x| 2.0 * g * x).collect())]
            }),
        )
    }

    /// RMS normalisation of each row followed by a learned per-column scale.
    /// A zero row maps to zero.
    pub fn rms_norm(&self, scale: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (sx, ss) = (self.shape(), scale.shape());
        let (m, n) = dims2("rms_norm", &sx)?;
        if ss != [n] {
            return Err(mismatch("rms_norm", &sx, &ss));
        }
        let (x, s) = (self.value(), scale.value());
        let inv_rms: Vec<f64> = x
            .data()
            .chunks(n)
            .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / n as f64 + eps).sqrt())
            .collect();
        let mut data = x.data().to_vec();
        for (r, &ir) in data.chunks_mut(n).zip(&inv_rms) {
            r.iter_mut().zip(s.data()).for_each(|(v, ss)| *v *= ir * ss);
        }
        self.tape.custom(
            "rms_norm",
            &[*self, *scale],
            Tensor::from_parts(vec![m, n], data),
            Box::new(move |ctx| {
                let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = ctx.needs[0].then(|| vec![0.0; m * n]);
                let mut gs = ctx.needs[1].then(|| vec![0.0; n]);
                for i in 0..m {
                    let ir = inv_rms[i];
                    let xr = &x[i * n..(i + 1) * n];
                    let gr = &ctx.grad[i * n..(i + 1) * n];
                    if let Some(gs) = &mut gs {
                        for j in 0..n {
                            gs[j] += gr[j] * xr[j] * ir;
                        }
                    }
                    if let Some(gx) = &mut gx {
                        // dn = g * s ; dx = (dn - n * mean(dn * n)) * ir, with n = x * ir
                        let mean: f64 = (0..n).map(|j| gr[j] * s[j] * xr[j] * ir).sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            gx[i * n + j] = (gr[j] * s[j] - xr[j] * ir * mean) * ir;
                        }
                    }
                }
                vec![gx, gs]
            }),
        )
    }

    /// L2-normalises each contiguous group of `group` columns in every row.
    /// Norms below `1e-12` are clamped, so a zero group stays zero.
    pub fn l2_normalize_groups(&self, group: usize) -> Result<Var<'t>> {
        const EPS: f64 = 1e-12;
        let shape = self.shape();
        let (_, n) = dims2("l2_normalize_groups", &shape)?;
        if group == 0 || n % group != 0 {
            return Err(mismatch("l2_normalize_groups", &shape, &[group]));
        }
        let x = self.value();
        let inv: Vec<f64> = x
            .data()
            .chunks(group)
            .map(|c| 1.0 / c.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS))
            .collect();
        let mut data = x.data().to_vec();
        data.chunks_mut(group)
            .zip(&inv)
            .for_each(|(c, &r)| c.iter_mut().for_each(|v| *v *= r));
        self.unary("l2_normalize_groups", data, move |ctx| {
            let y = ctx.output.data();
            let mut gx = vec![0.0; y.len()];
            for (((gxc, yc), gc), &r) in gx
                .chunks_mut(group)
                .zip(y.chunks(group))
                .zip(ctx.grad.chunks(group))
                .zip(&inv)
            {
                // Below the floor the op is a plain rescale.
                let yg: f64 = if r >= 1.0 / EPS {
                    0.0
                } else {
                    yc.iter().zip(gc).map(|(a, b)| a * b).sum()
                };
                for ((o, &yy), &gg) in gxc.iter_mut().zip(yc).zip(gc) {
                    *o = (gg - yy * yg) * r;
                }
            }
            gx
        })
    }

    /// Mean cross-entropy of `N x V` logits against integer targets; targets
    /// equal to `-1` are ignored.
    pub fn cross_entropy(&self, targets: &[i64]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (m, v) = dims2("cross_entropy", &shape)?;
        if targets.len() != m {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v as i64 || t < -1) {
            return Err(Error::TokenOutOfRange {
                id: bad.max(0) as usize,
                vocab: v,
            });
        }
        let count = targets.iter().filter(|&&t| t >= 0).count();
        if count == 0 {
            return Err(invalid("cross_entropy: no supervised positions"));
        }
        let x = self.value();
        let mut logp = vec![0.0; m * v];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            log_softmax_row(x.row(i), &mut logp[i * v..(i + 1) * v]);
            loss -= logp[i * v + t as usize];
        }
        let targets = targets.to_vec();
        self.tape.custom(
            "cross_entropy",
            &[*self],
            Tensor::scalar(loss / count as f64),
            Box::new(move |ctx| {
                let scale = ctx.grad[0] / count as f64;
                let mut g = vec![0.0; m * v];
                for (i, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    for j in 0..v {
                        g[i * v + j] = logp[i * v + j].exp() * scale;
                    }
                    g[i * v + t as usize] -= scale;
                }
                vec![Some(g)]
            }),
        )
    }

    /// `sum_rows KL(softmax(self/tau) || softmax(other/tau))`.
    ///
    /// `self` holds the reference (teacher) logits; detach it to stop its
    /// gradient.
    pub fn kl_div_rows(&self, other: &Var<'t>, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {tau}")));
        }
        let shape = self.same_shape(other, "kl_div_rows")?;
        let (m, v) = dims2("kl_div_rows", &shape)?;
        let (p, q) = (self.value(), other.value());
        let mut logp = vec![0.0; m * v];
        let mut logq = vec![0.0; m * v];
        let mut row_kl = vec![0.0; m];
        let mut scaled = vec![0.0; v];
        for i in 0..m {
            scaled.iter_mut().zip(p.row(i)).for_each(|(s, x)| *s = x / tau);
            log_softmax_row(&scaled, &mut logp[i * v..(i + 1) * v]);
            scaled.iter_mut().zip(q.row(i)).for_each(|(s, x)| *s = x / tau);
            log_softmax_row(&scaled, &mut logq[i * v..(i + 1) * v]);
            row_kl[i] = (0..v)
                .map(|j| {
                    let lp = logp[i * v + j];
                    lp.exp() * (lp - logq[i * v + j])
                })
                .sum();
        }
        let total = row_kl.iter().sum();
        self.tape.custom(
            "kl_div_rows",
            &[*self, *other],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad[0] / tau;
                let gp = ctx.needs[0].then(|| {
                    (0..m * v)
                        .map(|idx| {
                            let lp = logp[idx];
                            g * lp.exp() * (lp - logq[idx] - row_kl[idx / v])
                        })
                        .collect()
                });
                let gq = ctx.needs[1].then(|| {
                    (0..m * v).map(|idx| g * (logq[idx].exp() - logp[idx].exp())).collect()
                });
                vec![gp, gq]
            }),
        )
    }
}

/// Overflow of `exp(-x)` to infinity yields an exact 0, so no branch is needed.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn column_sums(x: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for r in x.chunks(n) {
        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::super::{finite_difference_check, Tape};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = x.softmax_rows().unwrap().value();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = rand_t(&[3, 3], 1);
        let i = tape.constant(Tensor::eye(3));
        let out = i.matmul(&tape.constant(a.clone())).unwrap().value();
        assert!(out.bit_eq(&a));
    }

    #[test]
    fn kl_of_identical_distributions_is_zero_with_zero_student_grad() {
        let tape = Tape::new();
        let logits = rand_t(&[3, 5], 2);
        let p = tape.constant(logits.clone());
        let q = tape.param(&logits);
        let kl = p.kl_div_rows(&q, 1.0).unwrap();
        assert!(kl.item().abs() < 1e-15);
        tape.backward(kl).unwrap();
        assert!(q.grad().unwrap().data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries_exactly() {
        let tape = Tape::new();
        let x = tape.constant(rand_t(&[2, 4], 3));
        let keep = [true, false, true, false, false, false, false, true];
        let y = x.masked_softmax_rows(&keep).unwrap().value();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                assert_eq!(y.data()[i], 0.0);
            }
        }
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(x.masked_softmax_rows(&[false; 8]).is_err());
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert!(a.add(&tape.constant(Tensor::zeros(&[3, 2]))).is_err());
    }

    #[test]
    fn rms_norm_of_zero_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let s = tape.constant(Tensor::full(&[4], 1.5));
        let y = x.rms_norm(&s, 1e-6).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_ignores_unsupervised_positions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 5.0, -5.0]));
        let loss = x.cross_entropy(&[0, -1]).unwrap().item();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(x.cross_entropy(&[-1, -1]).is_err());
        assert!(x.cross_entropy(&[2, 0]).is_err());
    }

    // Gradient checks: each primitive composed with a random linear functional
    // so every coordinate gets an O(1) gradient.
    fn check<F>(x: &Tensor, seed: u64, f: F)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
    {
        let err = finite_difference_check(
            |tape, x| {
                let y = f(tape, x)?;
                let w = tape.constant(rand_t(&y.shape(), seed + 1000));
                y.mul(&w)?.sum_all()
            },
            x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..5 {
            let x = rand_t(&[3, 4], seed);
            let other = rand_t(&[4, 2], seed + 50);
            let row = rand_t(&[4], seed + 60);
            check(&x, seed, |_, x| x.exp());
            check(&x, seed, |_, x| x.sigmoid());
            check(&x, seed, |_, x| x.silu());
            check(&x, seed, |_, x| x.mul(&x)?.add_scalar(1.0)?.log());
            check(&x, seed, |_, x| x.softmax_rows());
            check(&x, seed, |_, x| {
                x.masked_softmax_rows(&[
                    true, false, true, true, true, true, false, true, false, false, true, false,
                ])
            });
            check(&x, seed, |tape, x| x.matmul(&tape.constant(other.clone())));
            check(&other, seed, |tape, w| tape.constant(x.clone()).matmul(&w));
            check(&x, seed, |_, x| x.transpose());
            check(&x, seed, |tape, x| x.add_row(&tape.constant(row.clone())));
            check(&row, seed, |tape, b| tape.constant(x.clone()).add_row(&b));
            check(&x, seed, |tape, x| x.mul_row(&tape.constant(row.clone())));
            check(&row, seed, |tape, s| tape.constant(x.clone()).mul_row(&s));
            check(&x, seed, |tape, x| x.rms_norm(&tape.constant(row.clone()), 1e-6));
            check(&row, seed, |tape, s| tape.constant(x.clone()).rms_norm(&s, 1e-6));
            check(&x, seed, |_, x| x.l2_normalize_groups(2));
            check(&x, seed, |_, x| x.sum_axis(0));
            check(&x, seed, |_, x| x.mean_axis(1));
            check(&x, seed, |_, x| x.slice_rows(1..3));
            check(&x, seed, |_, x| x.slice_cols(1..3));
            check(&x, seed, |_, x| {
                Var::concat(&[x.slice_cols(0..1)?, x, x.slice_cols(2..4)?], 1)
            });
            check(&x, seed, |_, x| Var::concat(&[x, x.slice_rows(0..1)?], 0));
            check(&x, seed, |_, x| Var::embedding(&x, &[2, 0, 2, 1]));
            check(&row, seed, |tape, a| a.outer(&tape.constant(rand_t(&[3], seed))));
            check(&x, seed, |_, x| x.sq_l2());
            check(&x, seed, |_, x| x.mean_all());
            check(&x, seed, |_, x| x.reshape(&[2, 6])?.transpose());
            check(&x, seed, |_, x| x.cross_entropy(&[1, -1, 3]));
            check(&x, seed, |tape, x| {
                tape.constant(rand_t(&[3, 4], seed + 7)).kl_div_rows(&x, 2.0)
            });
            check(&x, seed, |tape, x| {
                x.kl_div_rows(&tape.constant(rand_t(&[3, 4], seed + 7)), 0.5)
            });
            let a3 = rand_t(&[2, 3, 4], seed + 70);
            let b3 = rand_t(&[2, 4, 2], seed + 80);
            check(&a3, seed, |tape, a| a.bmm(&tape.constant(b3.clone())));
            check(&b3, seed, |tape, b| tape.constant(a3.clone()).bmm(&b));
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let err = finite_difference_check(|_, x| x.sigmoid()?.sum_all(), &Tensor::zeros(&[1]), 1e-5)
            .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_sum_of_squares_gradient() {
        let x = rand_t(&[1, 8], 11);
        let err = finite_difference_check(
            |_, x| x.softmax_rows().and_then(|y| y.sq_l2()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
