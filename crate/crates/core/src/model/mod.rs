//! Pre-norm Transformer with per-layer mixer choice.
//!
//! Block `l`: `U = X + Mix(Norm(X))`, `X' = U + FFN(Norm(U))`, where the FFN
//! is `(silu(h W_gate) * (h W_up)) W_down`. A bypassed mixer gives `U = X`.

mod checkpoint;
pub mod circuit;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::mixers::{mix, Gates, MixerKind, MixerOptions, MixerParams, SeqDims};
use crate::tensor::Tensor;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint,
    FORMAT_VERSION, MAGIC,
};

/// Epsilon inside the RMS normalisation.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
}

/// Architecture of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub mixers: Vec<MixerKind>,
    pub norm: NormKind,
    pub ffn_mult: usize,
    pub tie_embeddings: bool,
    pub mixer_options: MixerOptions,
}

impl ModelSpec {
    /// Spec with `n_layers` copies of `kind` and default options.
    pub fn uniform(n_layers: usize, d_model: usize, heads: usize, vocab: usize, max_seq_len: usize, kind: MixerKind) -> Self {
        ModelSpec {
            n_layers,
            d_model,
            heads,
            head_dim: if heads == 0 { 0 } else { d_model / heads },
            vocab,
            max_seq_len,
            mixers: vec![kind; n_layers],
            norm: NormKind::Rms,
            ffn_mult: 4,
            tie_embeddings: true,
            mixer_options: MixerOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("a model needs at least one layer"));
        }
        if self.mixers.len() != self.n_layers {
            return Err(invalid(format!(
                "{} mixer kinds for {} layers",
                self.mixers.len(),
                self.n_layers
            )));
        }
        if self.heads == 0 || self.head_dim == 0 || self.d_model != self.heads * self.head_dim {
            return Err(invalid(format!(
                "width {} must equal heads {} x head_dim {}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(invalid("head_dim must be even for rotary embeddings"));
        }
        if self.vocab == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return Err(invalid("vocab, max_seq_len and ffn_mult must be positive"));
        }
        for m in &self.mixers {
            m.validate()?;
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Fields that must agree for weights to transfer between two models.
    pub fn shape_diff(&self, other: &ModelSpec) -> Vec<String> {
        let mut diff = Vec::new();
        let mut field = |name: &str, a: usize, b: usize| {
            if a != b {
                diff.push(format!("{name}: {a} != {b}"));
            }
        };
        field("n_layers", self.n_layers, other.n_layers);
        field("d_model", self.d_model, other.d_model);
        field("heads", self.heads, other.heads);
        field("head_dim", self.head_dim, other.head_dim);
        field("vocab", self.vocab, other.vocab);
        field("ffn_mult", self.ffn_mult, other.ffn_mult);
        if self.tie_embeddings != other.tie_embeddings {
            diff.push(format!(
                "tie_embeddings: {} != {}",
                self.tie_embeddings, other.tie_embeddings
            ));
        }
        diff
    }

    /// [`shape_diff`](Self::shape_diff) plus mixer kinds and options.
    pub fn full_diff(&self, other: &ModelSpec) -> Vec<String> {
        let mut diff = self.shape_diff(other);
        if self.max_seq_len != other.max_seq_len {
            diff.push(format!("max_seq_len: {} != {}", self.max_seq_len, other.max_seq_len));
        }
        for (l, (a, b)) in self.mixers.iter().zip(&other.mixers).enumerate() {
            if a != b {
                diff.push(format!("mixers[{l}]: {} != {}", a.label(), b.label()));
            }
        }
        if self.mixer_options != other.mixer_options {
            diff.push("mixer_options differ".into());
        }
        diff
    }

    pub fn layout(&self) -> HybridLayout {
        let softmax = (0..self.n_layers)
            .filter(|&l| !self.mixers[l].is_linear())
            .collect();
        HybridLayout::new(self.n_layers, softmax).expect("indices come from the model spec")
    }
}

/// Partition of layer indices into softmax-family and linear layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridLayout {
    n_layers: usize,
    softmax: BTreeSet<usize>,
    linear: BTreeSet<usize>,
}

impl HybridLayout {
    /// Layers in `softmax` keep attention; every other layer is linear.
    pub fn new(n_layers: usize, softmax: BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = softmax.iter().find(|&&l| l >= n_layers) {
            return Err(Error::LayerOutOfRange { layer: bad, n_layers });
        }
        let linear = (0..n_layers).filter(|l| !softmax.contains(l)).collect();
        Ok(HybridLayout {
            n_layers,
            softmax,
            linear,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn softmax(&self) -> &BTreeSet<usize> {
        &self.softmax
    }

    pub fn linear(&self) -> &BTreeSet<usize> {
        &self.linear
    }
}

/// Parameters of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub norm_mix: Tensor,
    pub mixer: MixerParams,
    pub norm_ffn: Tensor,
    pub ffn_gate: Tensor,
    pub ffn_up: Tensor,
    pub ffn_down: Tensor,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(spec: &ModelSpec, kind: MixerKind, rng: &mut R) -> Self {
        let (d, f) = (spec.d_model, spec.ffn_dim());
        LayerParams {
            norm_mix: Tensor::full(&[d], 1.0),
            mixer: MixerParams::init(kind, d, spec.heads, spec.head_dim, rng),
            norm_ffn: Tensor::full(&[d], 1.0),
            ffn_gate: Tensor::randn(&[d, f], 1.0 / (d as f64).sqrt(), rng),
            ffn_up: Tensor::randn(&[d, f], 1.0 / (d as f64).sqrt(), rng),
            ffn_down: Tensor::randn(&[f, d], 1.0 / (f as f64).sqrt(), rng),
        }
    }

    /// `(role, tensor)` pairs; mixer roles carry a `mixer.` prefix.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("norm_mix".into(), &self.norm_mix),
            ("norm_ffn".into(), &self.norm_ffn),
            ("ffn_gate".into(), &self.ffn_gate),
            ("ffn_up".into(), &self.ffn_up),
            ("ffn_down".into(), &self.ffn_down),
        ];
        out.extend(self.mixer.named().into_iter().map(|(n, t)| (format!("mixer.{n}"), t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("norm_mix".into(), &mut self.norm_mix),
            ("norm_ffn".into(), &mut self.norm_ffn),
            ("ffn_gate".into(), &mut self.ffn_gate),
            ("ffn_up".into(), &mut self.ffn_up),
            ("ffn_down".into(), &mut self.ffn_down),
        ];
        out.extend(
            self.mixer
                .named_mut()
                .into_iter()
                .map(|(n, t)| (format!("mixer.{n}"), t)),
        );
        out
    }
}

/// Address of a parameter: `layer = None` for embedding, unembedding and
/// the final norm. Orders globals first, then by layer and role.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub role: String,
}

impl ParamKey {
    pub fn global(role: &str) -> Self {
        ParamKey {
            layer: None,
            role: role.into(),
        }
    }

    pub fn layer(layer: usize, role: &str) -> Self {
        ParamKey {
            layer: Some(layer),
            role: role.into(),
        }
    }

    /// Role belongs to a sequence mixer.
    pub fn is_mixer(&self) -> bool {
        self.role.starts_with("mixer.")
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layers.{l}.{}", self.role),
            None => write!(f, "{}", self.role),
        }
    }
}

/// Where the weights came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub step: u64,
    /// Free-form facts such as a planted layer index.
    pub notes: BTreeMap<String, String>,
}

/// A model together with its provenance; the unit that is saved, loaded,
/// cloned and restored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub embed: Tensor,
    /// `d x V`; absent when tied to the embedding.
    pub unembed: Option<Tensor>,
    pub final_norm: Tensor,
    pub layers: Vec<LayerParams>,
    pub provenance: Provenance,
}

/// Output of a forward pass on a tape.
pub struct Forward<'t> {
    /// `(batch * seq_len) x vocab`
    pub logits: Var<'t>,
    /// `U` of every block when capture was requested.
    pub states: Vec<Var<'t>>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, seed: u64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (d, v) = (spec.d_model, spec.vocab);
        let embed = Tensor::randn(&[v, d], 1.0 / (d as f64).sqrt(), rng);
        let unembed = (!spec.tie_embeddings).then(|| Tensor::randn(&[d, v], 1.0 / (d as f64).sqrt(), rng));
        let layers = spec
            .mixers
            .iter()
            .map(|&k| LayerParams::init(&spec, k, rng))
            .collect();
        Ok(Model {
            embed,
            unembed,
            final_norm: Tensor::full(&[d], 1.0),
            layers,
            provenance: Provenance {
                seed,
                ..Provenance::default()
            },
            spec,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.spec.n_layers
    }

    /// Every parameter in manifest order.
    pub fn named_params(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = vec![
            (ParamKey::global("embed"), &self.embed),
            (ParamKey::global("final_norm"), &self.final_norm),
        ];
        if let Some(u) = &self.unembed {
            out.push((ParamKey::global("unembed"), u));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(r, t)| (ParamKey { layer: Some(l), role: r }, t)));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut out = vec![
            (ParamKey::global("embed"), &mut self.embed),
            (ParamKey::global("final_norm"), &mut self.final_norm),
        ];
        if let Some(u) = &mut self.unembed {
            out.push((ParamKey::global("unembed"), u));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(r, t)| (ParamKey { layer: Some(l), role: r }, t)),
            );
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks parameter shapes and gate layouts against the model spec.
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        s.validate()?;
        let (d, f, v) = (s.d_model, s.ffn_dim(), s.vocab);
        let check = |key: String, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(invalid(format!("{key} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        check("embed".into(), &self.embed, &[v, d])?;
        check("final_norm".into(), &self.final_norm, &[d])?;
        match (&self.unembed, s.tie_embeddings) {
            (None, true) => {}
            (Some(u), false) => check("unembed".into(), u, &[d, v])?,
            _ => return Err(invalid("unembedding presence disagrees with tie_embeddings")),
        }
        if self.layers.len() != s.n_layers {
            return Err(invalid("layer count disagrees with the model spec"));
        }
        for (l, (layer, &kind)) in self.layers.iter().zip(&s.mixers).enumerate() {
            check(format!("layers.{l}.norm_mix"), &layer.norm_mix, &[d])?;
            check(format!("layers.{l}.norm_ffn"), &layer.norm_ffn, &[d])?;
            check(format!("layers.{l}.ffn_gate"), &layer.ffn_gate, &[d, f])?;
            check(format!("layers.{l}.ffn_up"), &layer.ffn_up, &[d, f])?;
            check(format!("layers.{l}.ffn_down"), &layer.ffn_down, &[f, d])?;
            layer
                .mixer
                .validate(kind, d, s.heads, s.head_dim)
                .map_err(|e| invalid(format!("layer {l}: {e}")))?;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(invalid(format!(
                "{} tokens do not split into {batch} sequences",
                tokens.len()
            )));
        }
        let t = tokens.len() / batch;
        if t > self.spec.max_seq_len {
            return Err(invalid(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.spec.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= self.spec.vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.spec.vocab,
            });
        }
        Ok(t)
    }

    fn dims(&self, batch: usize, seq_len: usize) -> SeqDims {
        SeqDims::new(batch, seq_len, self.spec.heads, self.spec.head_dim)
    }

    /// Runs the model on `batch` sequences laid out back to back in
    /// `tokens`. `leaf` places each parameter on the tape (trainable or
    /// constant). With `capture`, returns every block's `U`.
    pub fn forward<'t>(
        &self,
        tokens: &[usize],
        batch: usize,
        capture: bool,
        leaf: &mut dyn FnMut(&ParamKey, &Tensor) -> Var<'t>,
    ) -> Result<Forward<'t>> {
        let t = self.check_tokens(tokens, batch)?;
        let dims = self.dims(batch, t);
        let embed = leaf(&ParamKey::global("embed"), &self.embed);
        let mut x = Var::embedding(&embed, tokens)?;
        let mut states = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (u, next) = self.block_on_tape(l, layer, &x, dims, leaf)?;
            if capture {
                states.push(u);
            }
            x = next;
        }
        let fnorm = leaf(&ParamKey::global("final_norm"), &self.final_norm);
        let h = x.rms_norm(&fnorm, NORM_EPS)?;
        let logits = match &self.unembed {
            Some(u) => h.matmul(&leaf(&ParamKey::global("unembed"), u))?,
            None => h.matmul(&embed.transpose()?)?,
        };
        Ok(Forward { logits, states })
    }

    fn block_on_tape<'t>(
        &self,
        l: usize,
        layer: &LayerParams,
        x: &Var<'t>,
        dims: SeqDims,
        leaf: &mut dyn FnMut(&ParamKey, &Tensor) -> Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let kind = self.spec.mixers[l];
        let mut p = |role: &str, t: &Tensor| leaf(&ParamKey::layer(l, role), t);
        let u = if kind == MixerKind::Bypass {
            *x
        } else {
            let h = x.rms_norm(&p("norm_mix", &layer.norm_mix), NORM_EPS)?;
            let bound = layer.mixer.bind(|role, t| p(&format!("mixer.{role}"), t));
            x.add(&mix(&h, kind, &bound, dims, &self.spec.mixer_options)?)?
        };
        let h = u.rms_norm(&p("norm_ffn", &layer.norm_ffn), NORM_EPS)?;
        let gate = h.matmul(&p("ffn_gate", &layer.ffn_gate))?.silu()?;
        let up = h.matmul(&p("ffn_up", &layer.ffn_up))?;
        let ffn = gate.mul(&up)?.matmul(&p("ffn_down", &layer.ffn_down))?;
        let next = u.add(&ffn)?;
        Ok((u, next))
    }

    /// Logits without gradient tracking, `(batch * seq_len) x vocab`.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        Ok(self.forward_capture(tokens, batch, false)?.0)
    }

    /// Logits and (optionally) every block's `U`, without gradient tracking.
    pub fn forward_capture(&self, tokens: &[usize], batch: usize, capture: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::new();
        let f = self.forward(tokens, batch, capture, &mut |_, t| tape.constant(t.clone()))?;
        let states = f.states.iter().map(|s| (*s.value()).clone()).collect();
        Ok(((*f.logits.value()).clone(), states))
    }

    /// Final hidden states before the output norm, without gradient tracking.
    pub fn final_hidden(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let t = self.check_tokens(tokens, batch)?;
        let mut x = self.embed_tokens(tokens)?;
        for l in 0..self.n_layers() {
            x = self.block_forward_batched(l, &x, batch, t)?.1;
        }
        Ok(x)
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let e = Var::embedding(&tape.constant(self.embed.clone()), tokens)?;
        Ok((*e.value()).clone())
    }

    fn block_forward_batched(&self, l: usize, x: &Tensor, batch: usize, seq_len: usize) -> Result<(Tensor, Tensor)> {
        let layer = self.layers.get(l).ok_or(Error::LayerOutOfRange {
            layer: l,
            n_layers: self.n_layers(),
        })?;
        if x.shape() != [batch * seq_len, self.spec.d_model] {
            return Err(Error::ShapeMismatch {
                op: "block_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![batch * seq_len, self.spec.d_model],
            });
        }
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (u, next) = self.block_on_tape(l, layer, &xv, self.dims(batch, seq_len), &mut |_, t| {
            tape.constant(t.clone())
        })?;
        Ok(((*u.value()).clone(), (*next.value()).clone()))
    }

    /// Block `l` on one `T x d` sequence, returning `(U, X')`.
    pub fn block_forward(&self, l: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape().len() != 2 || x.rows() == 0 {
            return Err(invalid("block input must be a non-empty T x d matrix"));
        }
        self.block_forward_batched(l, x, 1, x.rows())
    }

    /// The input of every block plus the final output for one sequence:
    /// `inputs[l]` enters block `l`.
    pub fn block_inputs(&self, tokens: &[usize]) -> Result<Vec<Tensor>> {
        self.check_tokens(tokens, 1)?;
        let mut xs = vec![self.embed_tokens(tokens)?];
        for l in 0..self.n_layers() {
            let next = self.block_forward(l, xs.last().expect("non-empty"))?.1;
            xs.push(next);
        }
        Ok(xs)
    }

    fn check_transfer(&self, teacher: &Model) -> Result<()> {
        let diff = self.spec.shape_diff(&teacher.spec);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::SpecMismatch(diff))
        }
    }

    /// Replaces layer `l` (kind and weights) with the teacher's layer `l`.
    /// `self` is left untouched.
    pub fn restore_layer(&self, l: usize, teacher: &Model) -> Result<Model> {
        if l >= self.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer: l,
                n_layers: self.n_layers(),
            });
        }
        self.check_transfer(teacher)?;
        let mut out = self.clone();
        out.spec.mixers[l] = teacher.spec.mixers[l];
        out.layers[l] = teacher.layers[l].clone();
        Ok(out)
    }
}

/// Builds a student with mixer kinds `target` from `teacher`.
///
/// Embeddings, norms and FFNs are copied. A layer whose target kind equals the
/// teacher's is copied wholesale. Otherwise the projections `W_Q, W_K, W_V,
/// W_O` are copied and fresh gates are drawn for linear targets.
pub fn init_student_from_teacher<R: Rng + ?Sized>(teacher: &Model, target: &[MixerKind], rng: &mut R) -> Result<Model> {
    if target.len() != teacher.n_layers() {
        return Err(Error::SpecMismatch(vec![format!(
            "n_layers: {} != {}",
            target.len(),
            teacher.n_layers()
        )]));
    }
    let mut spec = teacher.spec.clone();
    spec.mixers = target.to_vec();
    spec.validate()?;
    let mut student = teacher.clone();
    student.spec = spec;
    let (d, h, dh) = (teacher.spec.d_model, teacher.spec.heads, teacher.spec.head_dim);
    for (l, (&kind, layer)) in target.iter().zip(student.layers.iter_mut()).enumerate() {
        if kind == teacher.spec.mixers[l] {
            continue;
        }
        layer.mixer.gates = Gates::init(kind, d, h, dh, rng);
    }
    student.provenance.step = 0;
    Ok(student)
}

#[cfg(test)]
mod tests;
