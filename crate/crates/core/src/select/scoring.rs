//! One-swap importance scoring (greedy addition and removal) and the bypass
//! probes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Direction, ImportanceTable, Metric};
use crate::distill::{evaluate_hidden, evaluate_kl, heldout_slice, train_stage_observed, Stage, StageConfig};
use crate::error::{invalid, Error, Result};
use crate::mixers::{Gates, MixerKind};
use crate::model::{init_student_from_teacher, Model};
use crate::seed::{derive_seed, rng_for, tag};
use crate::tasks::{eval_accuracy, eval_perplexity, BatchStream, TaskBatch};

/// Budgets and options of a scoring pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// `S1Mse` (stage 1 only) or `S2Kl` (stage 1 then stage 2).
    pub metric: Metric,
    pub direction: Direction,
    /// Linear mixer put in place of converted layers.
    pub probe: MixerKind,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub seed: u64,
    /// Every job trains on the same batches instead of a per-layer stream.
    #[serde(default)]
    pub shared_data: bool,
    /// Record the score every this many steps of the last stage; 0 disables.
    #[serde(default)]
    pub snapshot_every: usize,
}

impl ScoringConfig {
    /// Scoring budgets at a quarter of the main-stage budgets.
    pub fn brief(metric: Metric, direction: Direction, probe: MixerKind, main1: &StageConfig, main2: &StageConfig, seed: u64) -> Self {
        let quarter = |c: &StageConfig| StageConfig {
            token_budget: (c.token_budget / 4).max(c.tokens_per_step()),
            ..c.clone()
        };
        ScoringConfig {
            metric,
            direction,
            probe,
            stage1: quarter(main1),
            stage2: quarter(main2),
            seed,
            shared_data: false,
            snapshot_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.metric, Metric::S1Mse | Metric::S2Kl) {
            return Err(invalid(format!("{} is not a one-swap metric", self.metric.label())));
        }
        if !matches!(self.direction, Direction::Ga | Direction::Gr) {
            return Err(invalid("one-swap scoring needs direction ga or gr"));
        }
        if !self.probe.is_linear() {
            return Err(invalid(format!("{} is not a linear mixer", self.probe.label())));
        }
        if self.stage1.stage != Stage::One || self.stage2.stage != Stage::Two {
            return Err(invalid("stage1 and stage2 budgets are swapped"));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// Data seed of job `job`.
    pub fn job_seed(&self, job: Option<usize>) -> u64 {
        match job {
            Some(l) if !self.shared_data => derive_seed(self.seed, &[tag("score"), l as u64]),
            _ => derive_seed(self.seed, &[tag("score")]),
        }
    }
}

/// Scores of one job recorded during its final stage, `(step, score)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub layer: usize,
    pub points: Vec<(usize, f64)>,
}

/// Brief adaptation of `model` followed by the held-out score, signed so
/// that a higher value means the layer is worth more as softmax.
fn adapt_and_score(
    mut model: Model,
    teacher: &Model,
    stream: &BatchStream,
    heldout: &[TaskBatch],
    config: &ScoringConfig,
    job: Option<usize>,
) -> Result<(f64, ScoreTrace, Model)> {
    let seed = config.job_seed(job);
    let sign = match config.direction {
        Direction::Gr => 1.0,
        _ => -1.0,
    };
    let measure = |m: &Model| -> Result<f64> {
        let raw = match config.metric {
            Metric::S1Mse => evaluate_hidden(m, teacher, heldout)?,
            _ => evaluate_kl(m, teacher, heldout, config.stage2.tau)?,
        };
        Ok(sign * raw)
    };
    let mut trace = ScoreTrace {
        layer: job.unwrap_or(usize::MAX),
        points: Vec::new(),
    };
    let mut record = |step: usize, m: &Model| -> Result<()> {
        trace.points.push((step, measure(m)?));
        Ok(())
    };
    let stages: &[&StageConfig] = match config.metric {
        Metric::S1Mse => &[&config.stage1],
        _ => &[&config.stage1, &config.stage2],
    };
    for (i, stage) in stages.iter().enumerate() {
        let cfg = StageConfig {
            seed: derive_seed(seed, &[i as u64]),
            ..(*stage).clone()
        };
        let last = i + 1 == stages.len();
        let observer = (last && config.snapshot_every > 0).then_some((config.snapshot_every, &mut record as &mut dyn FnMut(usize, &Model) -> Result<()>));
        train_stage_observed(&mut model, teacher, stream, &cfg, observer)?;
    }
    let score = measure(&model)?;
    Ok((score, trace, model))
}

fn check_layer(l: usize, n: usize) -> Result<()> {
    if l >= n {
        return Err(Error::LayerOutOfRange { layer: l, n_layers: n });
    }
    Ok(())
}

/// `I(l)`: restores layer `l` of the teacher into `all_linear`, adapts
/// briefly and returns the negated held-out loss.
pub fn one_swap_importance(l: usize, all_linear: &Model, teacher: &Model, stream: &BatchStream, config: &ScoringConfig) -> Result<f64> {
    config.validate()?;
    check_layer(l, all_linear.n_layers())?;
    let model = all_linear.restore_layer(l, teacher)?;
    Ok(adapt_and_score(model, teacher, stream, &heldout_slice(stream), config, Some(l))?.0)
}

/// Converts layer `l` of the teacher to the probe mixer, adapts briefly and
/// returns the held-out loss: removing a layer that matters costs more.
pub fn one_swap_removal_importance(l: usize, teacher: &Model, stream: &BatchStream, config: &ScoringConfig) -> Result<f64> {
    config.validate()?;
    check_layer(l, teacher.n_layers())?;
    let model = convert_layer(teacher, l, config.probe, config.job_seed(Some(l)))?;
    Ok(adapt_and_score(model, teacher, stream, &heldout_slice(stream), config, Some(l))?.0)
}

fn convert_layer(model: &Model, l: usize, probe: MixerKind, seed: u64) -> Result<Model> {
    let mut kinds = model.spec.mixers.clone();
    kinds[l] = probe;
    init_student_from_teacher(model, &kinds, &mut rng_for(seed, &[tag("convert")]))
}

/// Score of the unmodified start point with the same extra budget: the
/// all-linear model for addition, the teacher for removal.
pub fn no_swap_baseline(all_linear: Option<&Model>, teacher: &Model, stream: &BatchStream, config: &ScoringConfig) -> Result<f64> {
    config.validate()?;
    let start = match config.direction {
        Direction::Gr => teacher.clone(),
        _ => all_linear
            .ok_or_else(|| invalid("greedy addition needs the all-linear model"))?
            .clone(),
    };
    Ok(adapt_and_score(start, teacher, stream, &heldout_slice(stream), config, None)?.0)
}

/// Runs the one-swap job of every layer on up to `workers` threads and
/// returns the table plus each job's trace. `all_linear` is required for
/// greedy addition and ignored for removal. The result does not depend on
/// `workers`.
pub fn score_all_layers(
    all_linear: Option<&Model>,
    teacher: &Model,
    stream: &BatchStream,
    config: &ScoringConfig,
    workers: usize,
) -> Result<(ImportanceTable, Vec<ScoreTrace>)> {
    config.validate()?;
    let n = teacher.n_layers();
    let base = match config.direction {
        Direction::Ga => Some(all_linear.ok_or_else(|| invalid("greedy addition needs the all-linear model"))?),
        _ => None,
    };
    if let Some(b) = base {
        if let Some(l) = (0..n).find(|&l| !b.spec.mixers[l].is_linear()) {
            return Err(invalid(format!("layer {l} of the all-linear model is not linear")));
        }
    }
    let heldout = heldout_slice(stream);
    let job = |l: usize| -> Result<(f64, ScoreTrace)> {
        let model = match base {
            Some(b) => b.restore_layer(l, teacher)?,
            None => convert_layer(teacher, l, config.probe, config.job_seed(Some(l)))?,
        };
        let (score, trace, _) = adapt_and_score(model, teacher, stream, &heldout, config, Some(l))?;
        Ok((score, trace))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid(format!("cannot start {workers} workers: {e}")))?;
    let results: Vec<Result<(f64, ScoreTrace)>> = pool.install(|| (0..n).into_par_iter().map(job).collect());
    let mut scores = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for (l, r) in results.into_iter().enumerate() {
        match r {
            Ok((s, t)) => {
                scores.push(s);
                traces.push(t);
            }
            Err(e) => {
                return Err(Error::ScoringIncomplete {
                    layer: l,
                    reason: e.to_string(),
                })
            }
        }
    }
    let mut table = ImportanceTable::new(scores, config.metric, config.direction, config.probe, config.seed)?;
    let meta = &mut table.metadata;
    meta.insert("stage1_tokens".into(), config.stage1.tokens_consumed().into());
    meta.insert("stage2_tokens".into(), config.stage2.tokens_consumed().into());
    meta.insert("shared_data".into(), config.shared_data.into());
    meta.insert("workers".into(), workers.into());
    Ok((table, traces))
}

/// Top-`k` set of every recorded step across the traces of one pass.
pub fn snapshots_from_traces(traces: &[ScoreTrace], k: usize) -> Result<Vec<super::SelectionSnapshot>> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    super::check_k(k, traces.len())?;
    let steps: Vec<usize> = first.points.iter().map(|p| p.0).collect();
    if traces.iter().any(|t| t.points.iter().map(|p| p.0).ne(steps.iter().copied())) {
        return Err(invalid("traces were recorded at different steps"));
    }
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let scores: Vec<f64> = traces.iter().map(|t| t.points[i].1).collect();
            super::SelectionSnapshot {
                step,
                set: super::rank_by_score(&scores).into_iter().take(k).collect(),
            }
        })
        .collect())
}

/// Greedy removal in rounds: each round converts, among the layers still
/// softmax, the one whose removal raises the loss least, and continues from
/// that adapted model. Returns layers from most to least important.
pub fn iterative_removal_ranking(teacher: &Model, stream: &BatchStream, config: &ScoringConfig, workers: usize) -> Result<Vec<usize>> {
    config.validate()?;
    if config.direction != Direction::Gr {
        return Err(invalid("iterative ranking is a removal procedure"));
    }
    let heldout = heldout_slice(stream);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid(format!("cannot start {workers} workers: {e}")))?;
    let mut current = teacher.clone();
    let mut removed = Vec::new();
    let mut remaining: Vec<usize> = (0..teacher.n_layers())
        .filter(|&l| teacher.spec.mixers[l] != config.probe)
        .collect();
    for round in 0.. {
        if remaining.is_empty() {
            break;
        }
        let round_cfg = ScoringConfig {
            seed: derive_seed(config.seed, &[tag("round"), round]),
            ..config.clone()
        };
        let results: Vec<Result<(f64, Model)>> = pool.install(|| {
            remaining
                .par_iter()
                .map(|&l| {
                    let m = convert_layer(&current, l, config.probe, round_cfg.job_seed(Some(l)))?;
                    let (s, _, m) = adapt_and_score(m, teacher, stream, &heldout, &round_cfg, Some(l))?;
                    Ok((s, m))
                })
                .collect()
        });
        let mut best: Option<(usize, f64, Model)> = None;
        for (i, r) in results.into_iter().enumerate() {
            let l = remaining[i];
            let (s, m) = r.map_err(|e| Error::ScoringIncomplete {
                layer: l,
                reason: e.to_string(),
            })?;
            if best.as_ref().is_none_or(|b| s < b.1) {
                best = Some((l, s, m));
            }
        }
        let (l, _, m) = best.expect("remaining is non-empty");
        current = m;
        removed.push(l);
        remaining.retain(|&x| x != l);
    }
    // Layers already of the probe kind cost nothing to remove.
    let mut ranking: Vec<usize> = removed.into_iter().rev().collect();
    ranking.extend((0..teacher.n_layers()).filter(|&l| teacher.spec.mixers[l] == config.probe));
    Ok(ranking)
}

/// Probe of a bypass selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BypassMetric {
    ActMse,
    LmPpl,
    ArDrop,
}

impl BypassMetric {
    pub fn metric(self) -> Metric {
        match self {
            BypassMetric::ActMse => Metric::ActMse,
            BypassMetric::LmPpl => Metric::LmPpl,
            BypassMetric::ArDrop => Metric::ArDrop,
        }
    }
}

impl TryFrom<Metric> for BypassMetric {
    type Error = Error;

    fn try_from(m: Metric) -> Result<Self> {
        match m {
            Metric::ActMse => Ok(BypassMetric::ActMse),
            Metric::LmPpl => Ok(BypassMetric::LmPpl),
            Metric::ArDrop => Ok(BypassMetric::ArDrop),
            other => Err(invalid(format!("{} is not a bypass metric", other.label()))),
        }
    }
}

/// Evaluation batches for the bypass probes: generic text for activation
/// MSE and perplexity, a recall task for the accuracy drop.
#[derive(Clone, Debug)]
pub struct ProbeData {
    pub generic: Vec<TaskBatch>,
    pub recall: Vec<TaskBatch>,
}

/// Copy of `model` whose layer `l` skips its mixing sublayer.
pub fn bypass_layer(model: &Model, l: usize) -> Result<Model> {
    check_layer(l, model.n_layers())?;
    let mut out = model.clone();
    out.spec.mixers[l] = MixerKind::Bypass;
    out.layers[l].mixer.gates = Gates::None;
    Ok(out)
}

fn final_hidden_mse(a: &Model, b: &Model, batches: &[TaskBatch]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in batches {
        let ha = a.final_hidden(&batch.tokens, batch.batch)?;
        let hb = b.final_hidden(&batch.tokens, batch.batch)?;
        sum += ha.data().iter().zip(hb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        count += ha.numel();
    }
    if count == 0 {
        return Err(invalid("no probe data"));
    }
    Ok(sum / count as f64)
}

/// Damage done by bypassing layer `l`; higher means more important.
pub fn bypass_score(l: usize, teacher: &Model, metric: BypassMetric, data: &ProbeData) -> Result<f64> {
    let bypassed = bypass_layer(teacher, l)?;
    match metric {
        BypassMetric::ActMse => final_hidden_mse(teacher, &bypassed, &data.generic),
        BypassMetric::LmPpl => Ok(eval_perplexity(&bypassed, &data.generic)? - eval_perplexity(teacher, &data.generic)?),
        BypassMetric::ArDrop => Ok(eval_accuracy(teacher, &data.recall)? - eval_accuracy(&bypassed, &data.recall)?),
    }
}

/// [`bypass_score`] for every layer.
pub fn bypass_table(teacher: &Model, metric: BypassMetric, data: &ProbeData, seed: u64) -> Result<ImportanceTable> {
    let scores = (0..teacher.n_layers())
        .map(|l| bypass_score(l, teacher, metric, data))
        .collect::<Result<Vec<_>>>()?;
    ImportanceTable::new(scores, metric.metric(), Direction::NotApplicable, MixerKind::Bypass, seed)
}
