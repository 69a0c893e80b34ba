//! End-to-end runs on the hand-wired recall teachers: planted-layer
//! recovery, the softmax-budget sweep and the sliding-window sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{
    distill_all_linear, evaluate_kl, final_hybrid_distill, heldout_slice, train_stage, AdamConfig, Stage, StageConfig,
    DEFAULT_TAU,
};
use crate::error::{invalid, Result};
use crate::mixers::MixerKind;
use crate::model::circuit::{planted_recall_teacher, recall_copy_teacher, CIRCUIT_KEYS, CIRCUIT_VALUES};
use crate::model::{init_student_from_teacher, HybridLayout, Model};
use crate::select::{
    bypass_table, one_swap_removal_importance, score_all_layers, select_top_k, BypassMetric, Direction,
    ImportanceTable, Metric, ProbeData, ScoringConfig,
};
use crate::seed::{derive_seed, rng_for, tag};
use crate::tasks::{eval_accuracy, BatchStream, Partition, TaskBatch, TaskSpec};

/// Budgets shared by the distillation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage1_tokens: u64,
    pub stage2_tokens: u64,
    /// Stage-2 tokens of each final hybrid or SWA student.
    pub final_tokens: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl Budgets {
    pub fn stage(&self, stage: Stage, tokens: u64, seq_len: usize, seed: u64) -> StageConfig {
        StageConfig {
            optimizer: self.optimizer.clone(),
            ..StageConfig::new(stage, tokens, seq_len, self.batch_size, self.learning_rate, seed)
        }
    }
}

/// Planted-layer teacher and its recall task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_layers: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub pairs: usize,
    pub queries: usize,
    pub eval_sequences: usize,
    pub budgets: Budgets,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_layers: 6,
            seq_len: 128,
            vocab: 64,
            pairs: 8,
            queries: 8,
            eval_sequences: 64,
            budgets: Budgets {
                batch_size: 8,
                learning_rate: 1e-4,
                stage1_tokens: 64 * 8 * 128,
                stage2_tokens: 64 * 8 * 128,
                final_tokens: 32 * 8 * 128,
                optimizer: AdamConfig::default(),
            },
        }
    }
}

impl PlantedConfig {
    pub fn task(&self) -> Result<TaskSpec> {
        TaskSpec::kv_recall(self.pairs, self.queries, CIRCUIT_KEYS, CIRCUIT_VALUES, self.vocab, self.seq_len)
    }

    pub fn stream(&self, seed: u64) -> Result<BatchStream> {
        BatchStream::single(&self.task()?, self.budgets.batch_size, derive_seed(seed, &[tag("data")]), Partition::Train)
    }

    /// Held-out recall batches for accuracy.
    pub fn eval_batches(&self, seed: u64) -> Result<Vec<TaskBatch>> {
        Ok(self
            .stream(seed)?
            .with_partition(Partition::Heldout)
            .take_sequences(self.eval_sequences, 16))
    }

    /// The one-swap scoring pass, at a quarter of the all-linear budgets.
    pub fn scoring(&self, direction: Direction, seed: u64) -> ScoringConfig {
        let b = &self.budgets;
        ScoringConfig::brief(
            Metric::S2Kl,
            direction,
            MixerKind::Gla,
            &b.stage(Stage::One, b.stage1_tokens, self.seq_len, derive_seed(seed, &[tag("stage1")])),
            &b.stage(Stage::Two, b.stage2_tokens, self.seq_len, derive_seed(seed, &[tag("stage2")])),
            derive_seed(seed, &[tag("scoring")]),
        )
    }
}

/// Position of the softmax layer planted for `seed`.
pub fn planted_position(seed: u64, n_layers: usize) -> usize {
    rng_for(seed, &[tag("planted")]).random_range(0..n_layers)
}

/// Teacher with one softmax layer at [`planted_position`].
pub fn planted_teacher(config: &PlantedConfig, seed: u64) -> Result<Model> {
    let planted = planted_position(seed, config.n_layers);
    let mut m = planted_recall_teacher(config.n_layers, planted, config.vocab, config.seq_len)?;
    m.provenance.seed = seed;
    Ok(m)
}

/// Planted index recorded on a teacher.
pub fn planted_layer_of(teacher: &Model) -> Option<usize> {
    teacher.provenance.notes.get("planted_layer").and_then(|s| s.parse().ok())
}

/// Outcome of greedy-addition scoring on a planted teacher.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantedRun {
    pub seed: u64,
    pub planted: usize,
    pub teacher_accuracy: f64,
    pub all_linear_accuracy: f64,
    pub table: ImportanceTable,
    pub top: usize,
}

impl PlantedRun {
    pub fn recovered(&self) -> bool {
        self.top == self.planted
    }
}

/// Distils the all-GLA student, then scores every layer by one-swap
/// greedy addition.
pub fn planted_recovery(config: &PlantedConfig, seed: u64, workers: usize) -> Result<PlantedRun> {
    let teacher = planted_teacher(config, seed)?;
    let planted = planted_layer_of(&teacher).ok_or_else(|| invalid("teacher has no planted layer"))?;
    let stream = config.stream(seed)?;
    let eval = config.eval_batches(seed)?;
    let scoring = config.scoring(Direction::Ga, seed);
    let b = &config.budgets;
    let s1 = b.stage(Stage::One, b.stage1_tokens, config.seq_len, derive_seed(seed, &[tag("stage1")]));
    let s2 = b.stage(Stage::Two, b.stage2_tokens, config.seq_len, derive_seed(seed, &[tag("stage2")]));
    let (_, all_linear, _) = distill_all_linear(&teacher, MixerKind::Gla, &stream, &s1, &s2)?;
    let (table, _) = score_all_layers(Some(&all_linear), &teacher, &stream, &scoring, workers)?;
    Ok(PlantedRun {
        seed,
        planted,
        teacher_accuracy: eval_accuracy(&teacher, &eval)?,
        all_linear_accuracy: eval_accuracy(&all_linear, &eval)?,
        top: table.ranking()[0],
        table,
    })
}

/// Bypass accuracy-drop and one-swap-removal tables on a planted teacher.
pub fn planted_baselines(config: &PlantedConfig, seed: u64) -> Result<(ImportanceTable, ImportanceTable)> {
    let teacher = planted_teacher(config, seed)?;
    let stream = config.stream(seed)?;
    let probe = ProbeData {
        generic: Vec::new(),
        recall: config.eval_batches(seed)?,
    };
    let ar = bypass_table(&teacher, BypassMetric::ArDrop, &probe, seed)?;
    let scoring = config.scoring(Direction::Gr, seed);
    let scores = (0..config.n_layers)
        .map(|l| one_swap_removal_importance(l, &teacher, &stream, &scoring))
        .collect::<Result<Vec<f64>>>()?;
    let gr = ImportanceTable::new(scores, Metric::S2Kl, Direction::Gr, MixerKind::Gla, scoring.seed)?;
    Ok((ar, gr))
}

/// All-softmax recall-and-copy teacher with its task mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_layers: usize,
    pub shift_layer: usize,
    pub match_layer: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub pairs: usize,
    pub copy_window: usize,
    /// Share of local-copy sequences in the training mixture.
    pub copy_weight: f64,
    pub eval_sequences: usize,
    pub ks: Vec<usize>,
    pub windows: Vec<usize>,
    pub budgets: Budgets,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_layers: 6,
            shift_layer: 2,
            match_layer: 4,
            seq_len: 64,
            vocab: 64,
            pairs: 8,
            copy_window: 4,
            copy_weight: 0.5,
            eval_sequences: 256,
            ks: vec![0, 1, 2, 4, 6],
            windows: vec![1, 2, 4, 8, 16, 32],
            budgets: Budgets {
                batch_size: 8,
                learning_rate: 1e-4,
                stage1_tokens: 64 * 8 * 64,
                stage2_tokens: 64 * 8 * 64,
                final_tokens: 32 * 8 * 64,
                optimizer: AdamConfig::default(),
            },
        }
    }
}

impl SweepConfig {
    pub fn recall_task(&self) -> Result<TaskSpec> {
        TaskSpec::kv_recall(self.pairs, 1, CIRCUIT_KEYS, CIRCUIT_VALUES, self.vocab, self.seq_len)
    }

    pub fn copy_task(&self) -> Result<TaskSpec> {
        TaskSpec::local_copy(self.copy_window, CIRCUIT_KEYS, self.vocab, self.seq_len)
    }

    pub fn teacher(&self) -> Result<Model> {
        recall_copy_teacher(
            self.n_layers,
            self.shift_layer,
            self.match_layer,
            self.copy_window,
            self.vocab,
            self.seq_len,
        )
    }

    pub fn stream(&self, seed: u64) -> Result<BatchStream> {
        if !(0.0..1.0).contains(&self.copy_weight) {
            return Err(invalid(format!("copy weight {} must lie in [0, 1)", self.copy_weight)));
        }
        BatchStream::new(
            &[(self.recall_task()?, 1.0 - self.copy_weight), (self.copy_task()?, self.copy_weight)],
            self.budgets.batch_size,
            derive_seed(seed, &[tag("data")]),
            Partition::Train,
        )
    }

    fn eval(&self, task: &TaskSpec, seed: u64) -> Result<Vec<TaskBatch>> {
        Ok(BatchStream::single(task, 16, derive_seed(seed, &[tag("eval")]), Partition::Heldout)?
            .take_sequences(self.eval_sequences, 16))
    }

    /// Held-out recall, local-copy and KL batches.
    pub fn eval_sets(&self, seed: u64, stream: &BatchStream) -> Result<EvalSets> {
        Ok(EvalSets {
            recall: self.eval(&self.recall_task()?, seed)?,
            local: self.eval(&self.copy_task()?, seed)?,
            kl: heldout_slice(stream),
        })
    }
}

/// Accuracies of one student in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// `K` or the window.
    pub x: usize,
    pub softmax_layers: Vec<usize>,
    pub recall: f64,
    pub local: f64,
    /// Held-out stage-2 loss against the teacher.
    pub kl: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub teacher_recall: f64,
    pub teacher_local: f64,
    pub points: Vec<SweepPoint>,
    /// Greedy-addition table behind the selections; absent for window sweeps.
    pub table: Option<ImportanceTable>,
}

/// Held-out batches a sweep reports on.
#[derive(Clone, Debug)]
pub struct EvalSets {
    pub recall: Vec<TaskBatch>,
    pub local: Vec<TaskBatch>,
    /// Slice for the KL column.
    pub kl: Vec<TaskBatch>,
}

impl EvalSets {
    fn point(&self, x: usize, model: &Model, teacher: &Model) -> Result<SweepPoint> {
        let acc = |b: &[TaskBatch]| if b.is_empty() { Ok(f64::NAN) } else { eval_accuracy(model, b) };
        Ok(SweepPoint {
            x,
            softmax_layers: (0..model.n_layers())
                .filter(|&l| !model.spec.mixers[l].is_linear())
                .collect(),
            recall: acc(&self.recall)?,
            local: acc(&self.local)?,
            kl: evaluate_kl(model, teacher, &self.kl, DEFAULT_TAU)?,
        })
    }

    fn teacher_accuracy(&self, teacher: &Model) -> Result<(f64, f64)> {
        let acc = |b: &[TaskBatch]| if b.is_empty() { Ok(f64::NAN) } else { eval_accuracy(teacher, b) };
        Ok((acc(&self.recall)?, acc(&self.local)?))
    }
}

/// All-GLA distillation, greedy-addition scoring at a quarter of the
/// budgets, then one stage-2 hybrid per `K` in `ks`.
pub fn run_sweep_k(
    teacher: &Model,
    stream: &BatchStream,
    evals: &EvalSets,
    budgets: &Budgets,
    ks: &[usize],
    seed: u64,
    workers: usize,
) -> Result<SweepResult> {
    let t = stream.seq_len();
    let s1 = budgets.stage(Stage::One, budgets.stage1_tokens, t, derive_seed(seed, &[tag("stage1")]));
    let s2 = budgets.stage(Stage::Two, budgets.stage2_tokens, t, derive_seed(seed, &[tag("stage2")]));
    let (aligned, all_linear, _) = distill_all_linear(teacher, MixerKind::Gla, stream, &s1, &s2)?;
    let scoring = ScoringConfig::brief(
        Metric::S2Kl,
        Direction::Ga,
        MixerKind::Gla,
        &s1,
        &s2,
        derive_seed(seed, &[tag("scoring")]),
    );
    let (table, _) = score_all_layers(Some(&all_linear), teacher, stream, &scoring, workers)?;
    let final_cfg = budgets.stage(Stage::Two, budgets.final_tokens, t, derive_seed(seed, &[tag("final")]));
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let layout = HybridLayout::new(teacher.n_layers(), select_top_k(&table, k)?)?;
        let (hybrid, _) = final_hybrid_distill(&layout, &aligned, teacher, stream, &final_cfg)?;
        points.push(evals.point(k, &hybrid, teacher)?);
    }
    let (teacher_recall, teacher_local) = evals.teacher_accuracy(teacher)?;
    Ok(SweepResult {
        teacher_recall,
        teacher_local,
        points,
        table: Some(table),
    })
}

/// All-SWA students at each window, initialised from the teacher and
/// distilled with stage 2.
pub fn run_sweep_window(
    teacher: &Model,
    stream: &BatchStream,
    evals: &EvalSets,
    budgets: &Budgets,
    windows: &[usize],
    seed: u64,
) -> Result<SweepResult> {
    let final_cfg = budgets.stage(Stage::Two, budgets.final_tokens, stream.seq_len(), derive_seed(seed, &[tag("final")]));
    let mut points = Vec::with_capacity(windows.len());
    for &window in windows {
        let kinds = vec![MixerKind::SlidingWindow { window }; teacher.n_layers()];
        let mut rng = rng_for(seed, &[tag("swa"), window as u64]);
        let mut student = init_student_from_teacher(teacher, &kinds, &mut rng)?;
        train_stage(&mut student, teacher, stream, &final_cfg)?;
        points.push(evals.point(window, &student, teacher)?);
    }
    let (teacher_recall, teacher_local) = evals.teacher_accuracy(teacher)?;
    Ok(SweepResult {
        teacher_recall,
        teacher_local,
        points,
        table: None,
    })
}

/// [`run_sweep_k`] on the recall-and-copy teacher of `config`.
pub fn sweep_k(config: &SweepConfig, seed: u64, workers: usize) -> Result<SweepResult> {
    let stream = config.stream(seed)?;
    run_sweep_k(&config.teacher()?, &stream, &config.eval_sets(seed, &stream)?, &config.budgets, &config.ks, seed, workers)
}

/// [`run_sweep_window`] on the recall-and-copy teacher of `config`.
pub fn sweep_window(config: &SweepConfig, seed: u64) -> Result<SweepResult> {
    let stream = config.stream(seed)?;
    run_sweep_window(&config.teacher()?, &stream, &config.eval_sets(seed, &stream)?, &config.budgets, &config.windows, seed)
}
