//! Hand-wired recall teachers.
//!
//! Gradient descent finds the two-step recall mechanism (copy the previous
//! token's identity forward, then look it up) only after a long plateau, far
//! beyond a desk budget. These builders set the weights of a `d = 64`,
//! two-head model directly. Residual coordinates:
//!
//! * `0..16` the current token if it is a key,
//! * `16..32` the previous token's key code, written by a shift layer,
//! * `32..48` the current token if it is a value,
//! * `48` a constant, `49` PAD, `50` SEP, `51..64` spare.
//!
//! Keys are the first 16 content ids and values the next 16, which matches
//! [`TaskSpec::kv_recall`](crate::tasks::TaskSpec::kv_recall) with
//! `key_vocab = value_vocab = 16` and a local-copy alphabet of at most 16.

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{invalid, Result};
use crate::mixers::{Gates, MixerKind, MixerParams};
use crate::tasks::{FIRST_CONTENT, PAD, SEP};
use crate::tensor::Tensor;

pub const CIRCUIT_D: usize = 64;
pub const CIRCUIT_HEADS: usize = 2;
pub const CIRCUIT_KEYS: usize = 16;
pub const CIRCUIT_VALUES: usize = 16;

const HEAD_DIM: usize = CIRCUIT_D / CIRCUIT_HEADS;
const KEY: usize = 0;
const PREV: usize = 16;
const VAL: usize = 32;
const BIAS: usize = 48;
const PAD_DIM: usize = 49;
const SEP_DIM: usize = 50;
const SPARE: usize = 51;
const ROPE_BASE: f64 = 10_000.0;

/// What one block computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitRole {
    /// Linear mixer with a zero output projection.
    NullLinear,
    /// Softmax mixer with a zero output projection.
    NullSoftmax,
    /// Softmax head attending one position back, writing the key code of the
    /// previous token; optionally a second head copying the key
    /// `copy_offset` positions back onto the current one.
    SoftmaxShift { copy_offset: Option<usize> },
    /// Softmax head matching the current key against stored previous-token
    /// codes and emitting the value found there.
    SoftmaxMatch,
    /// Two linear heads with fast and zero memory whose difference isolates
    /// the previous positions.
    GlaShift,
    /// Linear attention without decay doing the same lookup as
    /// `SoftmaxMatch`.
    GlaMatch,
}

impl CircuitRole {
    fn kind(self) -> MixerKind {
        match self {
            CircuitRole::NullLinear | CircuitRole::GlaShift | CircuitRole::GlaMatch => MixerKind::Gla,
            _ => MixerKind::Softmax,
        }
    }
}

/// Scales of the construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitGains {
    /// Constant coordinate of every embedding.
    pub bias: f64,
    /// Logit margin of a positional head over its runner-up offset.
    pub position_margin: f64,
    /// Output gain of a shift layer.
    pub shift: f64,
    /// Query scale of a softmax lookup.
    pub match_sharpness: f64,
    /// Query scale of a linear lookup, which has no normalisation.
    pub gla_match_scale: f64,
    pub match_out: f64,
    pub copy_out: f64,
    /// Per-coordinate gain of the final norm on key and value coordinates.
    pub logit_scale: f64,
    /// Memory of the fast GLA shift head.
    pub gla_shift_decay: f64,
}

impl Default for CircuitGains {
    fn default() -> Self {
        CircuitGains {
            bias: 4.0,
            position_margin: 12.0,
            shift: 1.0,
            match_sharpness: 8.0,
            gla_match_scale: 0.2,
            match_out: 3.0,
            copy_out: 1.0,
            logit_scale: 4.0,
            gla_shift_decay: 0.1,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Weights `w` in `[-1, 1]` of the sine series
/// `f(delta) = sum_i w_i sin(delta theta_i)` over the rotary frequencies of
/// a head, pushing `f(offset)` above `f(delta)` for every other
/// `delta < horizon`. Returns `w` and the achieved margin. Projected
/// gradient ascent on a soft-max margin.
pub fn sine_profile(offset: usize, horizon: usize) -> (Vec<f64>, f64) {
    let half = HEAD_DIM / 2;
    let theta: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / HEAD_DIM as f64))
        .collect();
    let rows: Vec<Vec<f64>> = (0..horizon.max(offset + 1))
        .map(|d| theta.iter().map(|t| (d as f64 * t).sin()).collect())
        .collect();
    let f = |w: &[f64], d: usize| -> f64 { rows[d].iter().zip(w).map(|(x, y)| x * y).sum() };
    let (tau, step) = (0.02, 0.01);
    let mut w = vec![0.0; half];
    for _ in 0..4000 {
        let vals: Vec<(usize, f64)> = (0..rows.len()).filter(|&d| d != offset).map(|d| (d, f(&w, d))).collect();
        let top = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = vals.iter().map(|v| ((v.1 - top) / tau).exp()).collect();
        let z: f64 = p.iter().sum();
        for (i, wi) in w.iter_mut().enumerate() {
            let pull: f64 = vals.iter().zip(&p).map(|(v, pv)| pv / z * rows[v.0][i]).sum();
            *wi = (*wi + step * (rows[offset][i] - pull)).clamp(-1.0, 1.0);
        }
    }
    let rival = (0..rows.len())
        .filter(|&d| d != offset)
        .map(|d| f(&w, d))
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = f(&w, offset) - rival;
    (w, margin)
}

/// Normalised size of the constant coordinate in a fresh embedding row.
fn bias_hat(bias: f64) -> f64 {
    (CIRCUIT_D as f64).sqrt() * bias / (1.0 + bias * bias).sqrt()
}

/// Residual coordinate of a head channel of the slowest rotary pairs, so
/// that content matches barely rotate over a few dozen positions.
fn slow_dim(a: usize) -> usize {
    let half = HEAD_DIM / 2;
    let pairs = half - CIRCUIT_KEYS / 2;
    if a < CIRCUIT_KEYS / 2 {
        pairs + a
    } else {
        half + pairs + (a - CIRCUIT_KEYS / 2)
    }
}

fn embedding(vocab: usize, bias: f64) -> Tensor {
    let mut e = Tensor::zeros(&[vocab, CIRCUIT_D]);
    for id in 0..vocab {
        let dim = match id {
            PAD => PAD_DIM,
            SEP => SEP_DIM,
            _ if (FIRST_CONTENT..FIRST_CONTENT + CIRCUIT_KEYS).contains(&id) => KEY + id - FIRST_CONTENT,
            _ if (FIRST_CONTENT + CIRCUIT_KEYS..FIRST_CONTENT + CIRCUIT_KEYS + CIRCUIT_VALUES).contains(&id) => {
                VAL + id - FIRST_CONTENT - CIRCUIT_KEYS
            }
            _ => SPARE + id % (CIRCUIT_D - SPARE),
        };
        e.set(&[id, dim], 1.0);
        e.set(&[id, BIAS], bias);
    }
    e
}

struct Weights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

impl Weights {
    fn zero() -> Self {
        let w = CIRCUIT_D;
        Weights {
            wq: Tensor::zeros(&[CIRCUIT_D, w]),
            wk: Tensor::zeros(&[CIRCUIT_D, w]),
            wv: Tensor::zeros(&[CIRCUIT_D, w]),
            wo: Tensor::zeros(&[w, CIRCUIT_D]),
        }
    }

    /// Positional head on the constant coordinate attending `offset`
    /// positions back, with logit margin `margin` over every other offset
    /// below `horizon`. Queries sit on the first and keys on the second
    /// coordinate of each rotary pair, so every channel has `q_c k_c = 0` and
    /// the head writes nothing once it loses its rotary embedding.
    fn positional(&mut self, head: usize, offset: usize, margin: f64, horizon: usize, bias_hat: f64) {
        let half = HEAD_DIM / 2;
        let (w, unit) = sine_profile(offset, horizon);
        let scale = margin * (HEAD_DIM as f64).sqrt() / (unit * bias_hat * bias_hat);
        for (i, wi) in w.iter().enumerate() {
            let col = head * HEAD_DIM + i;
            self.wq.set(&[BIAS, col], scale * wi);
            self.wk.set(&[BIAS, col + half], 1.0);
        }
    }

    /// Value channel `c` of `head` reads coordinate `from` and writes `gain`
    /// times it to coordinate `to`.
    fn route(&mut self, head: usize, c: usize, from: usize, to: usize, gain: f64) {
        let col = head * HEAD_DIM + c;
        self.wv.set(&[from, col], 1.0);
        self.wo.set(&[col, to], gain);
    }

    /// Query = current key code, key = stored previous-token code.
    fn lookup(&mut self, head: usize, sharpness: f64) {
        for a in 0..CIRCUIT_KEYS {
            let col = head * HEAD_DIM + slow_dim(a);
            self.wq.set(&[KEY + a, col], sharpness);
            self.wk.set(&[PREV + a, col], 1.0);
        }
    }
}

fn layer_mixer(role: CircuitRole, g: &CircuitGains, horizon: usize) -> MixerParams {
    let mut w = Weights::zero();
    let mut gates = Gates::None;
    match role {
        CircuitRole::NullSoftmax => {}
        CircuitRole::NullLinear => {
            gates = Gates::Diagonal {
                w: Tensor::zeros(&[CIRCUIT_D, CIRCUIT_D]),
                b: Tensor::full(&[CIRCUIT_D], logit(0.5)),
            };
        }
        CircuitRole::SoftmaxShift { copy_offset } => {
            w.positional(0, 1, g.position_margin, horizon, bias_hat(g.bias));
            for a in 0..CIRCUIT_KEYS {
                w.route(0, a, KEY + a, PREV + a, g.shift);
            }
            if let Some(off) = copy_offset {
                w.positional(1, off, g.position_margin, horizon, bias_hat(g.bias));
                for a in 0..CIRCUIT_KEYS {
                    w.route(1, a, KEY + a, KEY + a, g.copy_out);
                }
            }
        }
        CircuitRole::SoftmaxMatch => {
            w.lookup(0, g.match_sharpness);
            for v in 0..CIRCUIT_VALUES {
                w.route(0, v, VAL + v, VAL + v, g.match_out);
            }
        }
        CircuitRole::GlaShift => {
            // Both heads share a constant query and key; head 0 remembers with
            // decay `a`, head 1 forgets at once. Their difference over `a`
            // drops the current token and keeps `x_{t-1} + a x_{t-2} + ...`.
            let a = g.gla_shift_decay;
            let bh = bias_hat(g.bias);
            let mut b = Tensor::zeros(&[CIRCUIT_D]);
            for h in 0..CIRCUIT_HEADS {
                w.wq.set(&[BIAS, h * HEAD_DIM], 1.0);
                w.wk.set(&[BIAS, h * HEAD_DIM], 1.0);
                let decay = if h == 0 { logit(a) } else { -40.0 };
                b.data_mut()[h * HEAD_DIM..(h + 1) * HEAD_DIM].fill(decay);
            }
            for c in 0..CIRCUIT_KEYS {
                let scale = g.shift / (a * bh * bh);
                w.route(0, c, KEY + c, PREV + c, scale);
                w.route(1, c, KEY + c, PREV + c, -scale);
            }
            gates = Gates::Diagonal {
                w: Tensor::zeros(&[CIRCUIT_D, CIRCUIT_D]),
                b,
            };
        }
        CircuitRole::GlaMatch => {
            w.lookup(0, g.gla_match_scale);
            for v in 0..CIRCUIT_VALUES {
                w.route(0, v, VAL + v, VAL + v, g.match_out);
            }
            gates = Gates::Diagonal {
                w: Tensor::zeros(&[CIRCUIT_D, CIRCUIT_D]),
                b: Tensor::full(&[CIRCUIT_D], 40.0),
            };
        }
    }
    MixerParams {
        wq: w.wq,
        wk: w.wk,
        wv: w.wv,
        wo: w.wo,
        gates,
    }
}

/// Builds a model whose block `l` computes `roles[l]`. Feed-forward
/// sublayers are zero.
pub fn circuit_model(roles: &[CircuitRole], vocab: usize, max_seq_len: usize, gains: &CircuitGains) -> Result<Model> {
    if vocab < FIRST_CONTENT + CIRCUIT_KEYS + CIRCUIT_VALUES {
        return Err(invalid(format!(
            "a circuit needs {} token ids, got {vocab}",
            FIRST_CONTENT + CIRCUIT_KEYS + CIRCUIT_VALUES
        )));
    }
    if roles.is_empty() {
        return Err(invalid("a circuit needs at least one layer"));
    }
    let mut spec = ModelSpec::uniform(roles.len(), CIRCUIT_D, CIRCUIT_HEADS, vocab, max_seq_len, MixerKind::Softmax);
    spec.ffn_mult = 2;
    spec.mixers = roles.iter().map(|r| r.kind()).collect();
    spec.validate()?;
    let f = spec.ffn_dim();
    let mut final_norm = Tensor::zeros(&[CIRCUIT_D]);
    final_norm.data_mut()[KEY..KEY + CIRCUIT_KEYS].fill(gains.logit_scale);
    final_norm.data_mut()[VAL..VAL + CIRCUIT_VALUES].fill(gains.logit_scale);
    let layers = roles
        .iter()
        .map(|&role| super::LayerParams {
            norm_mix: Tensor::full(&[CIRCUIT_D], 1.0),
            mixer: layer_mixer(role, gains, max_seq_len),
            norm_ffn: Tensor::full(&[CIRCUIT_D], 1.0),
            ffn_gate: Tensor::zeros(&[CIRCUIT_D, f]),
            ffn_up: Tensor::zeros(&[CIRCUIT_D, f]),
            ffn_down: Tensor::zeros(&[f, CIRCUIT_D]),
        })
        .collect();
    let model = Model {
        embed: embedding(vocab, gains.bias),
        unembed: None,
        final_norm,
        layers,
        provenance: super::Provenance::default(),
        spec,
    };
    model.validate()?;
    Ok(model)
}

/// Roles of a recall teacher whose only softmax layer is `planted`; every
/// other layer is GLA. The partner layers are redundant copies, so
/// bypassing any one of them leaves recall intact.
pub fn planted_roles(n_layers: usize, planted: usize) -> Result<Vec<CircuitRole>> {
    if n_layers < 2 || planted >= n_layers {
        return Err(invalid(format!("cannot plant layer {planted} in {n_layers} layers")));
    }
    Ok((0..n_layers)
        .map(|l| {
            if planted + 1 == n_layers {
                // Last layer: linear shifts before it, softmax lookup on top.
                if l == planted {
                    CircuitRole::SoftmaxMatch
                } else {
                    CircuitRole::GlaShift
                }
            } else if l < planted {
                CircuitRole::NullLinear
            } else if l == planted {
                CircuitRole::SoftmaxShift { copy_offset: None }
            } else {
                CircuitRole::GlaMatch
            }
        })
        .collect())
}

/// KV-recall teacher with exactly one softmax layer at `planted`.
pub fn planted_recall_teacher(n_layers: usize, planted: usize, vocab: usize, max_seq_len: usize) -> Result<Model> {
    let mut m = circuit_model(&planted_roles(n_layers, planted)?, vocab, max_seq_len, &CircuitGains::default())?;
    m.provenance.notes.insert("planted_layer".into(), planted.to_string());
    Ok(m)
}

/// All-softmax teacher solving KV recall (shift at `shift_layer`, lookup at
/// `match_layer`) and local copy at `copy_offset` (a second head of the
/// shift layer). Other layers are null.
pub fn recall_copy_teacher(
    n_layers: usize,
    shift_layer: usize,
    match_layer: usize,
    copy_offset: usize,
    vocab: usize,
    max_seq_len: usize,
) -> Result<Model> {
    if shift_layer >= match_layer || match_layer >= n_layers {
        return Err(invalid(format!(
            "need shift layer {shift_layer} < match layer {match_layer} < {n_layers}"
        )));
    }
    let roles: Vec<CircuitRole> = (0..n_layers)
        .map(|l| match l {
            _ if l == shift_layer => CircuitRole::SoftmaxShift {
                copy_offset: Some(copy_offset),
            },
            _ if l == match_layer => CircuitRole::SoftmaxMatch,
            _ => CircuitRole::NullSoftmax,
        })
        .collect();
    circuit_model(&roles, vocab, max_seq_len, &CircuitGains::default())
}
