//! Sequence mixers: softmax attention (full and sliding window), gated
//! linear attention, gated DeltaNet and the identity bypass.
//!
//! All mixers consume a `(batch * seq_len) x d` matrix of normalised hidden
//! states and produce the same shape. Heads are contiguous column groups of
//! width `head_dim`.

mod attention;
mod chunkwise;
mod linear;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Batch geometry shared by every mixer call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl SeqDims {
    pub fn new(batch: usize, seq_len: usize, heads: usize, head_dim: usize) -> Self {
        SeqDims {
            batch,
            seq_len,
            heads,
            head_dim,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Mixer type of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixerKind {
    Softmax,
    SlidingWindow { window: usize },
    Gla,
    GatedDeltaNet,
    Bypass,
}

impl MixerKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            MixerKind::SlidingWindow { window: 0 } => {
                Err(invalid("sliding window must cover at least one position"))
            }
            _ => Ok(()),
        }
    }

    /// GLA and gated DeltaNet.
    pub fn is_linear(&self) -> bool {
        matches!(self, MixerKind::Gla | MixerKind::GatedDeltaNet)
    }

    pub fn label(&self) -> String {
        match self {
            MixerKind::Softmax => "softmax".into(),
            MixerKind::SlidingWindow { window } => format!("swa{window}"),
            MixerKind::Gla => "gla".into(),
            MixerKind::GatedDeltaNet => "gdn".into(),
            MixerKind::Bypass => "bypass".into(),
        }
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "softmax" => MixerKind::Softmax,
            "gla" => MixerKind::Gla,
            "gdn" | "gated_delta_net" => MixerKind::GatedDeltaNet,
            "bypass" => MixerKind::Bypass,
            other => match other.strip_prefix("swa") {
                Some(w) => MixerKind::SlidingWindow {
                    window: w
                        .parse()
                        .map_err(|_| invalid(format!("bad window in mixer kind {other:?}")))?,
                },
                None => return Err(invalid(format!("unknown mixer kind {other:?}"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Gate projections. Pre-activations are squashed with a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gates {
    None,
    /// One decay per key channel: `alpha = sigmoid(x W + b)`, `W: d x width`.
    Diagonal { w: Tensor, b: Tensor },
    /// Scalar decay and write strength per head, `W: d x heads`.
    Delta {
        w_alpha: Tensor,
        b_alpha: Tensor,
        w_beta: Tensor,
        b_beta: Tensor,
    },
}

/// Initial decay of freshly created gates.
pub const GATE_INIT_ALPHA: f64 = 0.95;
/// Standard deviation of freshly created gate weights.
pub const GATE_INIT_STD: f64 = 0.02;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gates {
    /// Random gates for `kind`; empty for non-linear mixers.
    pub fn init<R: Rng + ?Sized>(kind: MixerKind, d: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        let width = heads * head_dim;
        match kind {
            MixerKind::Gla => Gates::Diagonal {
                w: Tensor::randn(&[d, width], GATE_INIT_STD, rng),
                b: Tensor::full(&[width], logit(GATE_INIT_ALPHA)),
            },
            MixerKind::GatedDeltaNet => Gates::Delta {
                w_alpha: Tensor::randn(&[d, heads], GATE_INIT_STD, rng),
                b_alpha: Tensor::full(&[heads], logit(GATE_INIT_ALPHA)),
                w_beta: Tensor::randn(&[d, heads], GATE_INIT_STD, rng),
                b_beta: Tensor::zeros(&[heads]),
            },
            _ => Gates::None,
        }
    }

    fn matches(&self, kind: MixerKind) -> bool {
        matches!(
            (self, kind),
            (Gates::Diagonal { .. }, MixerKind::Gla)
                | (Gates::Delta { .. }, MixerKind::GatedDeltaNet)
                | (
                    Gates::None,
                    MixerKind::Softmax | MixerKind::SlidingWindow { .. } | MixerKind::Bypass
                )
        )
    }
}

/// Projection weights of one mixer. `W_Q, W_K, W_V: d x width`, `W_O: width x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub gates: Gates,
}

impl MixerParams {
    /// Projections drawn with std `1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(kind: MixerKind, d: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        let width = heads * head_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let so = 1.0 / (width as f64).sqrt();
        MixerParams {
            wq: Tensor::randn(&[d, width], sd, rng),
            wk: Tensor::randn(&[d, width], sd, rng),
            wv: Tensor::randn(&[d, width], sd, rng),
            wo: Tensor::randn(&[width, d], so, rng),
            gates: Gates::init(kind, d, heads, head_dim, rng),
        }
    }

    /// Parameters keyed by role name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ];
        match &self.gates {
            Gates::None => {}
            Gates::Diagonal { w, b } => out.extend([("gate_w", w), ("gate_b", b)]),
            Gates::Delta {
                w_alpha,
                b_alpha,
                w_beta,
                b_beta,
            } => out.extend([
                ("alpha_w", w_alpha),
                ("alpha_b", b_alpha),
                ("beta_w", w_beta),
                ("beta_b", b_beta),
            ]),
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ];
        match &mut self.gates {
            Gates::None => {}
            Gates::Diagonal { w, b } => out.extend([("gate_w", w), ("gate_b", b)]),
            Gates::Delta {
                w_alpha,
                b_alpha,
                w_beta,
                b_beta,
            } => out.extend([
                ("alpha_w", w_alpha),
                ("alpha_b", b_alpha),
                ("beta_w", w_beta),
                ("beta_b", b_beta),
            ]),
        }
        out
    }

    /// Checks every shape against `(d, heads, head_dim)` and the gate layout
    /// against `kind`.
    pub fn validate(&self, kind: MixerKind, d: usize, heads: usize, head_dim: usize) -> Result<()> {
        let width = heads * head_dim;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(invalid(format!(
                    "mixer parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("wq", &self.wq, &[d, width])?;
        expect("wk", &self.wk, &[d, width])?;
        expect("wv", &self.wv, &[d, width])?;
        expect("wo", &self.wo, &[width, d])?;
        if !self.gates.matches(kind) {
            return Err(invalid(format!("gate layout does not fit mixer {}", kind.label())));
        }
        match &self.gates {
            Gates::None => Ok(()),
            Gates::Diagonal { w, b } => {
                expect("gate_w", w, &[d, width])?;
                expect("gate_b", b, &[width])
            }
            Gates::Delta {
                w_alpha,
                b_alpha,
                w_beta,
                b_beta,
            } => {
                expect("alpha_w", w_alpha, &[d, heads])?;
                expect("alpha_b", b_alpha, &[heads])?;
                expect("beta_w", w_beta, &[d, heads])?;
                expect("beta_b", b_beta, &[heads])
            }
        }
    }

    /// Places every parameter on a tape through `leaf`, which decides
    /// between trainable and constant leaves.
    pub fn bind<'t>(&self, mut leaf: impl FnMut(&'static str, &Tensor) -> Var<'t>) -> BoundMixer<'t> {
        let vars = self.named().into_iter().map(|(n, t)| leaf(n, t)).collect();
        BoundMixer { vars }
    }

    /// Binds everything as constants.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> BoundMixer<'t> {
        self.bind(|_, t| tape.constant(t.clone()))
    }
}

/// Mixer parameters placed on a tape, in [`MixerParams::named`] order.
#[derive(Clone, Debug)]
pub struct BoundMixer<'t> {
    pub vars: Vec<Var<'t>>,
}

/// Options that are not learned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerOptions {
    /// Rotary base for softmax and sliding-window mixers.
    pub rope_base: f64,
    /// Gated DeltaNet writes `b_t k_t v_t^T` when true, `k_t v_t^T` otherwise.
    pub beta_on_write: bool,
    /// When set, linear mixers evaluated without any trainable input use the
    /// chunked kernel with this block size.
    pub chunk: Option<usize>,
}

impl Default for MixerOptions {
    fn default() -> Self {
        MixerOptions {
            rope_base: 10_000.0,
            beta_on_write: true,
            chunk: None,
        }
    }
}

/// Identity, used for the bypassed mixing sublayer.
pub fn bypass<'t>(x: &Var<'t>) -> Var<'t> {
    *x
}

fn linear_inputs<'t>(x: &Var<'t>, p: &BoundMixer<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    Ok((x.matmul(&p.vars[0])?, x.matmul(&p.vars[1])?, x.matmul(&p.vars[2])?))
}

/// Applies the mixer of `kind` to normalised inputs `x` (`rows x d`), up to
/// and including the output projection. `Bypass` returns `x` unchanged.
pub fn mix<'t>(
    x: &Var<'t>,
    kind: MixerKind,
    p: &BoundMixer<'t>,
    dims: SeqDims,
    opts: &MixerOptions,
) -> Result<Var<'t>> {
    kind.validate()?;
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != dims.rows() {
        return Err(Error::ShapeMismatch {
            op: "mix",
            lhs: shape,
            rhs: vec![dims.rows(), 0],
        });
    }
    let heads_out = match kind {
        MixerKind::Bypass => return Ok(bypass(x)),
        MixerKind::Softmax | MixerKind::SlidingWindow { .. } => {
            let window = match kind {
                MixerKind::SlidingWindow { window } => Some(window),
                _ => None,
            };
            let (q, k, v) = linear_inputs(x, p)?;
            let q = attention::rope(&q, dims, opts.rope_base)?;
            let k = attention::rope(&k, dims, opts.rope_base)?;
            attention::causal_attention(&q, &k, &v, dims, window)?
        }
        MixerKind::Gla => {
            let (q, k, v) = linear_inputs(x, p)?;
            let alpha = x.matmul(&p.vars[4])?.add_row(&p.vars[5])?.sigmoid()?;
            match inference_chunk(&[&q, &k, &v, &alpha], opts) {
                Some(c) => {
                    let (out, _) = chunkwise::chunked_scan(
                        q.value().data(),
                        k.value().data(),
                        v.value().data(),
                        alpha.value().data(),
                        &[],
                        dims,
                        linear::Transition::Diagonal,
                        c,
                    );
                    x.tape().constant(Tensor::from_parts(vec![dims.rows(), dims.width()], out))
                }
                None => linear::gla_scan(&q, &k, &v, &alpha, dims)?,
            }
        }
        MixerKind::GatedDeltaNet => {
            let (q, k, v) = linear_inputs(x, p)?;
            let k = k.l2_normalize_groups(dims.head_dim)?;
            let alpha = x.matmul(&p.vars[4])?.add_row(&p.vars[5])?.sigmoid()?;
            let beta = x.matmul(&p.vars[6])?.add_row(&p.vars[7])?.sigmoid()?;
            match inference_chunk(&[&q, &k, &v, &alpha, &beta], opts) {
                Some(c) => {
                    let (out, _) = chunkwise::chunked_scan(
                        q.value().data(),
                        k.value().data(),
                        v.value().data(),
                        alpha.value().data(),
                        beta.value().data(),
                        dims,
                        linear::Transition::Delta {
                            beta_on_write: opts.beta_on_write,
                        },
                        c,
                    );
                    x.tape().constant(Tensor::from_parts(vec![dims.rows(), dims.width()], out))
                }
                None => linear::gdn_scan(&q, &k, &v, &alpha, &beta, dims, opts.beta_on_write)?,
            }
        }
    };
    heads_out.matmul(&p.vars[3])
}

fn inference_chunk(inputs: &[&Var<'_>], opts: &MixerOptions) -> Option<usize> {
    let c = opts.chunk?;
    (c > 0 && inputs.iter().all(|v| !v.requires_grad())).then_some(c)
}

/// Per-head associative memory after the last position, each `head_dim x
/// head_dim` with rows indexed by key channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub heads: Vec<Tensor>,
}

fn single_sequence(x: &Tensor, heads: usize, params: &MixerParams) -> Result<SeqDims> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(invalid("mixer input must be a T x d matrix"));
    }
    if shape[0] == 0 {
        return Err(invalid("mixer input needs at least one position"));
    }
    let width = params.wq.cols();
    if heads == 0 || width % heads != 0 {
        return Err(invalid(format!("{heads} heads do not divide width {width}")));
    }
    Ok(SeqDims::new(1, shape[0], heads, width / heads))
}

fn run_single(x: &Tensor, heads: usize, kind: MixerKind, params: &MixerParams, opts: &MixerOptions) -> Result<Tensor> {
    let dims = single_sequence(x, heads, params)?;
    params.validate(kind, x.cols(), dims.heads, dims.head_dim)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = params.bind_constant(&tape);
    let out = mix(&xv, kind, &p, dims, opts)?;
    Ok((*out.value()).clone())
}

/// Causal multi-head softmax attention over one `T x d` sequence.
pub fn softmax_attention(x: &Tensor, heads: usize, params: &MixerParams, opts: &MixerOptions) -> Result<Tensor> {
    run_single(x, heads, MixerKind::Softmax, params, opts)
}

/// Softmax attention restricted to the current position and the `window`
/// positions before it.
pub fn sliding_window_attention(
    x: &Tensor,
    heads: usize,
    params: &MixerParams,
    window: usize,
    opts: &MixerOptions,
) -> Result<Tensor> {
    run_single(x, heads, MixerKind::SlidingWindow { window }, params, opts)
}

fn linear_single(
    x: &Tensor,
    heads: usize,
    kind: MixerKind,
    params: &MixerParams,
    opts: &MixerOptions,
) -> Result<(Tensor, RecurrentState)> {
    let dims = single_sequence(x, heads, params)?;
    params.validate(kind, x.cols(), dims.heads, dims.head_dim)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = params.bind_constant(&tape);
    let (q, k, v) = linear_inputs(&xv, &p)?;
    let alpha = xv.matmul(&p.vars[4])?.add_row(&p.vars[5])?.sigmoid()?;
    let (k, beta, transition) = match kind {
        MixerKind::Gla => (k, None, linear::Transition::Diagonal),
        _ => (
            k.l2_normalize_groups(dims.head_dim)?,
            Some(xv.matmul(&p.vars[6])?.add_row(&p.vars[7])?.sigmoid()?),
            linear::Transition::Delta {
                beta_on_write: opts.beta_on_write,
            },
        ),
    };
    let beta_vals = beta.map(|b| b.value());
    let res = linear::scan(
        q.value().data(),
        k.value().data(),
        v.value().data(),
        alpha.value().data(),
        beta_vals.as_ref().map_or(&[][..], |b| b.data()),
        dims,
        transition,
    );
    let state = RecurrentState {
        heads: (0..heads)
            .map(|h| Tensor::from_parts(vec![dims.head_dim; 2], res.final_state(dims, 0, h).to_vec()))
            .collect(),
    };
    let out = Tensor::from_parts(vec![dims.rows(), dims.width()], res.out);
    let y = crate::linalg::matmul(
        crate::linalg::Mat::new(out.data(), dims.rows(), dims.width()),
        crate::linalg::Mat::new(params.wo.data(), dims.width(), x.cols()),
    );
    Ok((Tensor::from_parts(vec![dims.rows(), x.cols()], y), state))
}

/// Gated linear attention over one sequence, returning the output and the
/// final state.
pub fn gla_forward(
    x: &Tensor,
    heads: usize,
    params: &MixerParams,
    opts: &MixerOptions,
) -> Result<(Tensor, RecurrentState)> {
    linear_single(x, heads, MixerKind::Gla, params, opts)
}

/// Gated DeltaNet over one sequence, returning the output and the final
/// state.
pub fn gdn_forward(
    x: &Tensor,
    heads: usize,
    params: &MixerParams,
    opts: &MixerOptions,
) -> Result<(Tensor, RecurrentState)> {
    linear_single(x, heads, MixerKind::GatedDeltaNet, params, opts)
}

/// Chunked evaluation of a linear mixer with block size `chunk`.
pub fn chunkwise_linear_forward(
    x: &Tensor,
    heads: usize,
    params: &MixerParams,
    chunk: usize,
    kind: MixerKind,
    opts: &MixerOptions,
) -> Result<Tensor> {
    if !kind.is_linear() {
        return Err(invalid(format!("chunked evaluation needs a linear mixer, got {}", kind.label())));
    }
    if chunk == 0 {
        return Err(invalid("chunk size must be at least 1"));
    }
    let opts = MixerOptions {
        chunk: Some(chunk),
        ..*opts
    };
    run_single(x, heads, kind, params, &opts)
}
