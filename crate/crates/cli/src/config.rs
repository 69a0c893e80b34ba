//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use hybrid_distill::distill::{Stage, StageConfig};
use hybrid_distill::experiments::Budgets;
use hybrid_distill::mixers::MixerKind;
use hybrid_distill::select::{Direction, EarlyStopMode, Metric, ScoringConfig, StabilityConfig};
use hybrid_distill::seed::{derive_seed, tag};
use hybrid_distill::tasks::{BatchStream, Partition, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a subcommand needs. Paths are relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    /// Training mixture; also the source of the evaluation tasks.
    #[serde(default)]
    pub tasks: Vec<WeightedTask>,
    #[serde(default)]
    pub budgets: Option<Budgets>,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub selection: Option<SelectionSection>,
    #[serde(default)]
    pub stability: Option<StabilitySection>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub inputs: Inputs,
}

fn one() -> usize {
    1
}

/// How `train-teacher` obtains its model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherConfig {
    /// Hand-wired recall circuit with a single softmax layer.
    CircuitPlanted {
        n_layers: usize,
        /// Defaults to a seed-derived position.
        #[serde(default)]
        planted: Option<usize>,
        vocab: usize,
        seq_len: usize,
    },
    /// Hand-wired all-softmax recall and local-copy circuit.
    CircuitRecallCopy {
        n_layers: usize,
        shift_layer: usize,
        match_layer: usize,
        copy_offset: usize,
        vocab: usize,
        seq_len: usize,
    },
    /// Next-token training from random init on the task mixture.
    Trained {
        n_layers: usize,
        d_model: usize,
        heads: usize,
        #[serde(default = "four")]
        ffn_mult: usize,
        /// Planted-hybrid mode: softmax only at this layer.
        #[serde(default)]
        planted: Option<usize>,
        #[serde(default = "gla")]
        linear: MixerKind,
        token_budget: u64,
        batch_size: usize,
        learning_rate: f64,
        #[serde(default = "target")]
        target_accuracy: f64,
    },
    Checkpoint { path: PathBuf },
}

fn four() -> usize {
    4
}

fn gla() -> MixerKind {
    MixerKind::Gla
}

fn target() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTask {
    #[serde(flatten)]
    pub task: TaskSpec,
    #[serde(default = "unit")]
    pub weight: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    #[serde(default = "s2kl")]
    pub metric: Metric,
    #[serde(default = "ga")]
    pub direction: Direction,
    #[serde(default = "gla")]
    pub probe: MixerKind,
    #[serde(default)]
    pub shared_data: bool,
    #[serde(default)]
    pub snapshot_every: usize,
}

fn s2kl() -> Metric {
    Metric::S2Kl
}

fn ga() -> Direction {
    Direction::Ga
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection {
            metric: Metric::S2Kl,
            direction: Direction::Ga,
            probe: MixerKind::Gla,
            shared_data: false,
            snapshot_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Top-K of one importance table (GA or GR).
    TopK,
    /// Mean position in a GA and a GR ranking.
    AvgRank,
    Uniform,
    DistanceRegularized,
    /// Bypass probe on the teacher, then top-K.
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "sigma")]
    pub sigma: f64,
    /// For `bypass`: `act-mse`, `lm-ppl` or `ar-drop`.
    #[serde(default)]
    pub bypass_metric: Option<Metric>,
    /// For `uniform` without an input table.
    #[serde(default)]
    pub n_layers: Option<usize>,
}

fn sigma() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub k: usize,
    #[serde(default = "ten")]
    pub window: usize,
    #[serde(default = "ninety")]
    pub jaccard_threshold: f64,
    #[serde(default = "standard")]
    pub mode: EarlyStopMode,
}

fn ten() -> usize {
    10
}

fn ninety() -> f64 {
    0.9
}

fn standard() -> EarlyStopMode {
    EarlyStopMode::Standard
}

impl StabilitySection {
    pub fn config(&self) -> StabilityConfig {
        StabilityConfig {
            k: self.k,
            window: self.window,
            jaccard_threshold: self.jaccard_threshold,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub windows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out sequences per evaluation task.
    #[serde(default = "sixty_four")]
    pub sequences: usize,
}

fn sixty_four() -> usize {
    64
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sequences: 64 }
    }
}

/// Artifacts of earlier commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub teacher: Option<PathBuf>,
    pub aligned: Option<PathBuf>,
    pub all_linear: Option<PathBuf>,
    /// Importance table JSON from `score-layers`.
    pub table: Option<PathBuf>,
    /// Second table for `avg_rank` (the GR one).
    pub table_gr: Option<PathBuf>,
    /// Rankings given inline, most important first.
    pub ranking: Option<Vec<usize>>,
    pub ranking_gr: Option<Vec<usize>>,
    pub selection: Option<PathBuf>,
    /// Further selections compared by `analyze-adjacency`.
    #[serde(default)]
    pub selections: Vec<PathBuf>,
    /// `score-layers` output directory or a snapshot JSON list.
    pub snapshots: Option<PathBuf>,
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads, applies overrides, resolves relative paths and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(o) = &overrides.out {
            cfg.out = Some(o.clone());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(TeacherConfig::Checkpoint { path }) = &mut self.teacher {
            fix(path);
        }
        let i = &mut self.inputs;
        for p in [
            &mut i.teacher,
            &mut i.aligned,
            &mut i.all_linear,
            &mut i.table,
            &mut i.table_gr,
            &mut i.selection,
            &mut i.snapshots,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        i.selections.iter_mut().for_each(fix);
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if let Err(e) = t.task.validate() {
                return bad(&format!("tasks[{i}]"), e.to_string());
            }
            if !(t.weight > 0.0) || !t.weight.is_finite() {
                return bad(&format!("tasks[{i}].weight"), format!("must be positive, got {}", t.weight));
            }
        }
        if let Some(first) = self.tasks.first() {
            if self.tasks.iter().any(|t| t.task.seq_len != first.task.seq_len || t.task.vocab != first.task.vocab) {
                return bad("tasks", "all tasks must share seq_len and vocab".into());
            }
        }
        if let Some(b) = &self.budgets {
            if b.batch_size == 0 {
                return bad("budgets.batch_size", "must be positive".into());
            }
            if !(b.learning_rate >= 0.0) || !b.learning_rate.is_finite() {
                return bad("budgets.learning_rate", format!("must be finite and non-negative, got {}", b.learning_rate));
            }
            if let Err(e) = b.optimizer.validate() {
                return bad("budgets.optimizer", e.to_string());
            }
            if let Some(t) = self.seq_len() {
                for (field, tokens) in [
                    ("budgets.stage1_tokens", b.stage1_tokens),
                    ("budgets.stage2_tokens", b.stage2_tokens),
                    ("budgets.final_tokens", b.final_tokens),
                ] {
                    if tokens < (b.batch_size * t) as u64 {
                        return bad(field, format!("{tokens} tokens is less than one batch of {}", b.batch_size * t));
                    }
                }
            }
        }
        if !self.scoring.probe.is_linear() {
            return bad("scoring.probe", format!("{} is not a linear mixer", self.scoring.probe.label()));
        }
        if !matches!(self.scoring.metric, Metric::S1Mse | Metric::S2Kl) {
            return bad("scoring.metric", "one-swap scoring uses s1-mse or s2-kl".into());
        }
        if !matches!(self.scoring.direction, Direction::Ga | Direction::Gr) {
            return bad("scoring.direction", "must be ga or gr".into());
        }
        if let Some(s) = &self.selection {
            if !(s.lambda >= 0.0) || !s.lambda.is_finite() {
                return bad("selection.lambda", format!("must be finite and non-negative, got {}", s.lambda));
            }
            if !(s.sigma > 0.0) || !s.sigma.is_finite() {
                return bad("selection.sigma", format!("must be positive, got {}", s.sigma));
            }
            if s.strategy == Strategy::Bypass && s.bypass_metric.is_none() {
                return bad("selection.bypass_metric", "required by the bypass strategy".into());
            }
        }
        if let Some(s) = &self.stability {
            if s.window < 2 {
                return bad("stability.window", "must be at least 2".into());
            }
            if !(0.0..=1.0).contains(&s.jaccard_threshold) {
                return bad("stability.jaccard_threshold", "must lie in [0, 1]".into());
            }
        }
        if let Some(w) = self.sweep.windows.iter().position(|&w| w == 0) {
            return bad(&format!("sweep.windows[{w}]"), "must be positive".into());
        }
        if self.eval.sequences == 0 {
            return bad("eval.sequences", "must be positive".into());
        }
        if let Some(TeacherConfig::Trained { target_accuracy, .. }) = &self.teacher {
            if !(0.0..=1.0).contains(target_accuracy) {
                return bad("teacher.target_accuracy", "must lie in [0, 1]".into());
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> Option<usize> {
        self.tasks.first().map(|t| t.task.seq_len)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn require_budgets(&self) -> Result<&Budgets, CliError> {
        self.budgets
            .as_ref()
            .ok_or_else(|| CliError::Config("budgets: section required by this command".into()))
    }

    pub fn require_selection(&self) -> Result<&SelectionSection, CliError> {
        self.selection
            .as_ref()
            .ok_or_else(|| CliError::Config("selection: section required by this command".into()))
    }

    /// Training stream over the task mixture.
    pub fn stream(&self) -> Result<BatchStream, CliError> {
        if self.tasks.is_empty() {
            return Err(CliError::Config("tasks: at least one task is required".into()));
        }
        let batch = self.budgets.as_ref().map_or(8, |b| b.batch_size);
        let mix: Vec<(TaskSpec, f64)> = self.tasks.iter().map(|t| (t.task.clone(), t.weight)).collect();
        BatchStream::new(&mix, batch, derive_seed(self.seed, &[tag("data")]), Partition::Train)
            .map_err(|e| CliError::Config(format!("tasks: {e}")))
    }

    /// First configured task of the given family.
    pub fn task_of(&self, pred: impl Fn(&TaskKind) -> bool) -> Option<&TaskSpec> {
        self.tasks.iter().map(|t| &t.task).find(|t| pred(&t.kind))
    }

    pub fn stage_configs(&self) -> Result<(StageConfig, StageConfig), CliError> {
        let b = self.require_budgets()?;
        let t = self.seq_len().ok_or_else(|| CliError::Config("tasks: at least one task is required".into()))?;
        Ok((
            b.stage(Stage::One, b.stage1_tokens, t, derive_seed(self.seed, &[tag("stage1")])),
            b.stage(Stage::Two, b.stage2_tokens, t, derive_seed(self.seed, &[tag("stage2")])),
        ))
    }

    pub fn final_stage(&self) -> Result<StageConfig, CliError> {
        let b = self.require_budgets()?;
        let t = self.seq_len().ok_or_else(|| CliError::Config("tasks: at least one task is required".into()))?;
        Ok(b.stage(Stage::Two, b.final_tokens, t, derive_seed(self.seed, &[tag("final")])))
    }

    /// Scoring budgets at a quarter of the main stages.
    pub fn scoring_config(&self) -> Result<ScoringConfig, CliError> {
        let (s1, s2) = self.stage_configs()?;
        let s = &self.scoring;
        Ok(ScoringConfig {
            shared_data: s.shared_data,
            snapshot_every: s.snapshot_every,
            ..ScoringConfig::brief(s.metric, s.direction, s.probe, &s1, &s2, derive_seed(self.seed, &[tag("scoring")]))
        })
    }
}
