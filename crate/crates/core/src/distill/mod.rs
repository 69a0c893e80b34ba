//! Two-stage distillation of a teacher into a student with different mixers.
//!
//! Stage 1 aligns every block's post-mixer state `U` with the teacher's while
//! only linear mixers train. Stage 2 matches temperature-softened output
//! distributions and trains everything.

mod optim;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::mixers::MixerKind;
use crate::model::{init_student_from_teacher, HybridLayout, Model, ModelSpec, ParamKey};
use crate::seed::{rng_for, tag};
use crate::tasks::{BatchStream, Partition, TaskBatch};
use crate::tensor::Tensor;

pub use optim::{lr_at, Adam, AdamConfig};
pub use report::{LossPoint, StageReport};

/// Default distillation temperature.
pub const DEFAULT_TAU: f64 = 2.0;
/// Sequences in a held-out evaluation slice.
pub const HELDOUT_SEQUENCES: usize = 32;
/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Hidden-state alignment.
    One,
    /// Output distribution matching.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only the parameters of linear-attention mixers train.
    LinearMixers,
    All,
}

impl FreezePolicy {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::One => FreezePolicy::LinearMixers,
            Stage::Two => FreezePolicy::All,
        }
    }

    pub fn trainable(&self, key: &ParamKey, spec: &ModelSpec) -> bool {
        match self {
            FreezePolicy::All => true,
            FreezePolicy::LinearMixers => {
                key.is_mixer() && key.layer.is_some_and(|l| spec.mixers[l].is_linear())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub token_budget: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Temperature; only read in stage 2.
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub freeze: FreezePolicy,
    /// Seeds the order of training batches.
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl StageConfig {
    pub fn new(stage: Stage, token_budget: u64, seq_len: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        StageConfig {
            stage,
            token_budget,
            seq_len,
            batch_size,
            learning_rate,
            tau: DEFAULT_TAU,
            freeze: FreezePolicy::for_stage(stage),
            seed,
            optimizer: AdamConfig::default(),
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    /// Optimizer steps; a trailing partial batch is dropped.
    pub fn steps(&self) -> usize {
        (self.token_budget / self.tokens_per_step().max(1)) as usize
    }

    /// Tokens actually consumed: `steps() * batch_size * seq_len`.
    pub fn tokens_consumed(&self) -> u64 {
        self.steps() as u64 * self.tokens_per_step()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(invalid("batch_size and seq_len must be positive"));
        }
        if self.token_budget < self.tokens_per_step() {
            return Err(invalid(format!(
                "token budget {} is smaller than one batch of {} tokens",
                self.token_budget,
                self.tokens_per_step()
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if self.freeze != FreezePolicy::for_stage(self.stage) {
            return Err(invalid(format!(
                "stage {} requires freeze policy {:?}",
                u8::from(self.stage),
                FreezePolicy::for_stage(self.stage)
            )));
        }
        self.optimizer.validate()
    }
}

/// Supervised next-token training settings (used to train teachers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub token_budget: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl SupervisedConfig {
    fn as_stage(&self) -> StageConfig {
        StageConfig {
            optimizer: self.optimizer.clone(),
            ..StageConfig::new(
                Stage::Two,
                self.token_budget,
                self.seq_len,
                self.batch_size,
                self.learning_rate,
                self.seed,
            )
        }
    }
}

/// `sum_l (1/T) ||U_teacher^l - U_student^l||_F^2`, with `T` the number of
/// rows (positions across the batch). Teacher states are constants.
pub fn stage1_loss<'t>(teacher: &[Tensor], student: &[Var<'t>]) -> Result<Var<'t>> {
    if teacher.len() != student.len() {
        return Err(invalid(format!(
            "{} teacher states for {} student states",
            teacher.len(),
            student.len()
        )));
    }
    let Some(first) = student.first() else {
        return Err(invalid("hidden-state loss over zero layers"));
    };
    let tape = first.tape();
    let mut total: Option<Var<'t>> = None;
    for (t, s) in teacher.iter().zip(student) {
        let rows = t.rows().max(1) as f64;
        let term = s.sub(&tape.constant(t.clone()))?.sq_l2()?.scale(1.0 / rows)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `(tau^2 / T) sum_t KL(softmax(teacher_t / tau) || softmax(student_t / tau))`.
/// The teacher logits are detached, so no gradient reaches them.
pub fn stage2_loss<'t>(teacher_logits: &Var<'t>, student_logits: &Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let rows = teacher_logits.shape().first().copied().unwrap_or(0).max(1) as f64;
    teacher_logits
        .detach()
        .kl_div_rows(student_logits, tau)?
        .scale(tau * tau / rows)
}

/// Value of [`stage2_loss`] summed rather than averaged over rows.
fn kl_sum(teacher_logits: Tensor, student_logits: Tensor, tau: f64) -> Result<f64> {
    let tape = Tape::new();
    let kl = tape
        .constant(teacher_logits)
        .kl_div_rows(&tape.constant(student_logits), tau)?;
    Ok(kl.item() * tau * tau)
}

fn check_pair(student: &Model, teacher: &Model) -> Result<()> {
    let diff = student.spec.shape_diff(&teacher.spec);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::SpecMismatch(diff))
    }
}

/// The first [`HELDOUT_SEQUENCES`] sequences of the held-out partition.
pub fn heldout_slice(stream: &BatchStream) -> Vec<TaskBatch> {
    stream
        .with_partition(Partition::Heldout)
        .take_sequences(HELDOUT_SEQUENCES, EVAL_CHUNK)
}

/// Mean stage-2 loss of `model` against `teacher` over `heldout`; the
/// one-swap importance is its negation.
pub fn evaluate_kl(model: &Model, teacher: &Model, heldout: &[TaskBatch], tau: f64) -> Result<f64> {
    check_pair(model, teacher)?;
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for b in heldout {
        for start in (0..b.batch).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(b.batch - start);
            let tokens = &b.tokens[start * b.seq_len..(start + n) * b.seq_len];
            total += kl_sum(teacher.logits(tokens, n)?, model.logits(tokens, n)?, tau)?;
            rows += tokens.len();
        }
    }
    if rows == 0 {
        return Err(invalid("held-out slice is empty"));
    }
    Ok(total / rows as f64)
}

/// Mean stage-1 loss of `model` against `teacher` per held-out sequence.
pub fn evaluate_hidden(model: &Model, teacher: &Model, heldout: &[TaskBatch]) -> Result<f64> {
    check_pair(model, teacher)?;
    let mut total = 0.0;
    let mut seqs = 0usize;
    for b in heldout {
        for start in (0..b.batch).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(b.batch - start);
            let tokens = &b.tokens[start * b.seq_len..(start + n) * b.seq_len];
            let (_, ts) = teacher.forward_capture(tokens, n, true)?;
            let (_, ss) = model.forward_capture(tokens, n, true)?;
            let sq: f64 = ts
                .iter()
                .zip(&ss)
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            total += sq / b.seq_len as f64;
            seqs += n;
        }
    }
    if seqs == 0 {
        return Err(invalid("held-out slice is empty"));
    }
    Ok(total / seqs as f64)
}

enum Objective<'a> {
    Hidden(&'a Model),
    Kl(&'a Model, f64),
    CrossEntropy,
}

/// One optimizer step on `batch`; returns the loss before the update.
fn train_step(
    model: &mut Model,
    batch: &TaskBatch,
    objective: &Objective<'_>,
    freeze: &FreezePolicy,
    adam: &mut Adam,
    lr: f64,
) -> Result<f64> {
    let (tokens, b) = (&batch.tokens[..], batch.batch);
    let target = match objective {
        Objective::Hidden(t) => Some(t.forward_capture(tokens, b, true)?),
        Objective::Kl(t, _) => Some(t.forward_capture(tokens, b, false)?),
        Objective::CrossEntropy => None,
    };
    let tape = Tape::new();
    let mut leaves: Vec<(ParamKey, Var<'_>)> = Vec::new();
    let spec = model.spec.clone();
    let capture = matches!(objective, Objective::Hidden(_));
    let fwd = model.forward(tokens, b, capture, &mut |key, t| {
        if freeze.trainable(key, &spec) {
            let v = tape.param(t);
            leaves.push((key.clone(), v));
            v
        } else {
            tape.constant(t.clone())
        }
    })?;
    let loss = match (objective, target) {
        (Objective::Hidden(_), Some((_, states))) => stage1_loss(&states, &fwd.states)?,
        (Objective::Kl(_, tau), Some((logits, _))) => {
            stage2_loss(&tape.constant(logits), &fwd.logits, *tau)?
        }
        _ => fwd.logits.cross_entropy(&batch.targets)?,
    };
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    if leaves.is_empty() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let grads: BTreeMap<ParamKey, Vec<f64>> = leaves
        .iter()
        .map(|(k, v)| {
            let g = tape.grad(*v).map(Tensor::into_data);
            (k.clone(), g.unwrap_or_else(|| vec![0.0; v.value().numel()]))
        })
        .collect();
    let params = model.named_params_mut();
    adam.step(
        lr,
        params
            .into_iter()
            .filter_map(|(k, t)| grads.get(&k).map(|g| (k, t, g.as_slice()))),
    );
    Ok(value)
}

/// Callback run after every `every`-th optimizer step with the 1-based step
/// count and the updated model.
pub type Observer<'a> = (usize, &'a mut dyn FnMut(usize, &Model) -> Result<()>);

fn fit(
    model: &mut Model,
    stream: &BatchStream,
    config: &StageConfig,
    objective: Objective<'_>,
    label: &str,
    mut observer: Option<Observer<'_>>,
) -> Result<StageReport> {
    config.validate()?;
    model.validate()?;
    if stream.seq_len() != config.seq_len || stream.batch_size() != config.batch_size {
        return Err(invalid(format!(
            "stream yields {}x{} batches but the config asks for {}x{}",
            stream.batch_size(),
            stream.seq_len(),
            config.batch_size,
            config.seq_len
        )));
    }
    let data = stream.with_partition(Partition::Train).reseed(config.seed);
    let steps = config.steps();
    let mut adam = Adam::new(config.optimizer.clone());
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = data.batch(step as u64);
        let lr = lr_at(config.learning_rate, step, steps, config.optimizer.warmup_frac);
        let loss = train_step(model, &batch, &objective, &config.freeze, &mut adam, lr)?;
        curve.push(LossPoint {
            step,
            tokens: (step as u64 + 1) * config.tokens_per_step(),
            loss,
        });
        if let Some((every, f)) = observer.as_mut() {
            if *every > 0 && (step + 1) % *every == 0 {
                f(step + 1, model)?;
            }
        }
    }
    model.provenance.step += steps as u64;
    Ok(StageReport {
        label: label.to_string(),
        config: config.clone(),
        tokens_consumed: config.tokens_consumed(),
        curve,
    })
}

/// Trains `student` against a frozen `teacher` on the training partition of
/// `stream`, reseeded with `config.seed`.
///
/// Consumes `config.steps()` full batches; a budget that is not a multiple of
/// `batch_size * seq_len` drops the trailing partial batch.
pub fn train_stage(student: &mut Model, teacher: &Model, stream: &BatchStream, config: &StageConfig) -> Result<StageReport> {
    train_stage_observed(student, teacher, stream, config, None)
}

/// [`train_stage`] with an optional periodic observer.
pub fn train_stage_observed(
    student: &mut Model,
    teacher: &Model,
    stream: &BatchStream,
    config: &StageConfig,
    observer: Option<Observer<'_>>,
) -> Result<StageReport> {
    check_pair(student, teacher)?;
    let (objective, label) = match config.stage {
        Stage::One => (Objective::Hidden(teacher), "stage1"),
        Stage::Two => (Objective::Kl(teacher, config.tau), "stage2"),
    };
    fit(student, stream, config, objective, label, observer)
}

/// Next-token cross-entropy training on the supervised positions of
/// `stream`; every parameter trains.
pub fn train_supervised(model: &mut Model, stream: &BatchStream, config: &SupervisedConfig) -> Result<StageReport> {
    train_supervised_observed(model, stream, config, None)
}

/// [`train_supervised`] with an optional periodic observer.
pub fn train_supervised_observed(
    model: &mut Model,
    stream: &BatchStream,
    config: &SupervisedConfig,
    observer: Option<Observer<'_>>,
) -> Result<StageReport> {
    fit(model, stream, &config.as_stage(), Objective::CrossEntropy, "supervised", observer)
}

/// Stage 1 followed by stage 2 on a fresh all-`probe` student. Returns the
/// stage-1 aligned model, the fully distilled model and both reports.
pub fn distill_all_linear(
    teacher: &Model,
    probe: MixerKind,
    stream: &BatchStream,
    stage1: &StageConfig,
    stage2: &StageConfig,
) -> Result<(Model, Model, Vec<StageReport>)> {
    if !probe.is_linear() {
        return Err(invalid(format!("{} is not a linear mixer", probe.label())));
    }
    let mut rng = rng_for(stage1.seed, &[tag("student-init")]);
    let mut student = init_student_from_teacher(teacher, &vec![probe; teacher.n_layers()], &mut rng)?;
    let r1 = train_stage(&mut student, teacher, stream, stage1)?;
    let aligned = student.clone();
    let r2 = train_stage(&mut student, teacher, stream, stage2)?;
    Ok((aligned, student, vec![r1, r2]))
}

/// Restores the layers in `layout.softmax()` from the teacher on top of the
/// stage-1 aligned all-linear model and runs stage 2 only.
pub fn final_hybrid_distill(
    layout: &HybridLayout,
    aligned: &Model,
    teacher: &Model,
    stream: &BatchStream,
    config: &StageConfig,
) -> Result<(Model, StageReport)> {
    if layout.n_layers() != aligned.n_layers() {
        return Err(invalid(format!(
            "layout covers {} layers but the model has {}",
            layout.n_layers(),
            aligned.n_layers()
        )));
    }
    if config.stage != Stage::Two {
        return Err(invalid("the final hybrid runs stage 2 only"));
    }
    if let Some(l) = layout.linear().iter().find(|&&l| !aligned.spec.mixers[l].is_linear()) {
        return Err(invalid(format!("layer {l} of the aligned model is not linear")));
    }
    let mut hybrid = aligned.clone();
    for &l in layout.softmax() {
        hybrid = hybrid.restore_layer(l, teacher)?;
    }
    let report = train_stage(&mut hybrid, teacher, stream, config)?;
    Ok((hybrid, report))
}

#[cfg(test)]
mod tests;
