//! One function per subcommand. Each reads its inputs, runs, and writes every
//! artifact after the work is done.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use hybrid_distill::distill::{
    distill_all_linear, evaluate_kl, final_hybrid_distill, heldout_slice, train_supervised, StageReport, SupervisedConfig,
    DEFAULT_TAU,
};
use hybrid_distill::experiments::{planted_position, run_sweep_k, run_sweep_window, EvalSets, SweepResult};
use hybrid_distill::mixers::MixerKind;
use hybrid_distill::model::circuit::{planted_recall_teacher, recall_copy_teacher};
use hybrid_distill::model::{load_checkpoint, save_checkpoint, HybridLayout, Model, ModelSpec};
use hybrid_distill::select::{
    adjacency_index, avg_rank_select, bypass_table, distance_regularized_select, early_stop_step, expected_adjacency,
    jaccard, score_all_layers, scores_from_ranking, select_top_k, snapshots_from_traces, uniform_select,
    BypassMetric, Direction, ImportanceTable, Metric, ProbeData, ScoreTrace, Selection, SelectionSnapshot,
};
use hybrid_distill::seed::{derive_seed, rng_for, tag};
use hybrid_distill::tasks::{eval_accuracy, BatchStream, Partition, TaskBatch, TaskKind, TaskSpec};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, Strategy, TeacherConfig};
use crate::CliError;

const EVAL_CHUNK: usize = 16;

/// Output directory, created on first use.
struct Out {
    dir: PathBuf,
}

impl Out {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = cfg.out_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("out: {}: {e}", dir.display())))?;
        Ok(Out { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// JSON artifact carrying the command, base seed and resolved config.
    fn json<T: Serialize>(&self, name: &str, cfg: &RunConfig, command: &str, result: &T) -> Result<PathBuf, CliError> {
        let doc = json!({
            "command": command,
            "seed": cfg.seed,
            "config": cfg,
            "result": result,
        });
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(path)
    }

    fn checkpoint(&self, name: &str, model: &Model, cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
        let mut m = model.clone();
        let notes = &mut m.provenance.notes;
        notes.insert("command".into(), command.into());
        notes.insert("base_seed".into(), cfg.seed.to_string());
        notes.insert("run_config".into(), serde_json::to_string(cfg)?);
        let path = self.path(name);
        save_checkpoint(&m, &path)?;
        Ok(path)
    }

    fn curve(&self, name: &str, report: &StageReport) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        report.write_csv(fs::File::create(&path)?)?;
        Ok(path)
    }
}

fn input<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("inputs.{field}: required by this command")))
}

fn load_model(p: &Option<PathBuf>, field: &str) -> Result<Model, CliError> {
    let path = input(p, field)?;
    load_checkpoint(path).map_err(|e| CliError::Config(format!("inputs.{field}: {}: {e}", path.display())))
}

/// JSON file, unwrapped from its artifact envelope and then from `key`
/// when present.
fn read_artifact(path: &Path, field: &str, key: &str) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("inputs.{field}: {}: {e}", path.display())))?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("inputs.{field}: {}: {e}", path.display())))?;
    if let Some(r) = v.get_mut("result") {
        v = r.take();
    }
    if let Some(inner) = v.get_mut(key) {
        v = inner.take();
    }
    Ok(v)
}

fn parse_artifact<T: serde::de::DeserializeOwned>(path: &Path, field: &str, key: &str) -> Result<T, CliError> {
    serde_json::from_value(read_artifact(path, field, key)?)
        .map_err(|e| CliError::Config(format!("inputs.{field}: {}: {e}", path.display())))
}

fn load_table(path: &Option<PathBuf>, ranking: &Option<Vec<usize>>, field: &str, direction: Direction) -> Result<ImportanceTable, CliError> {
    match (path, ranking) {
        (Some(p), _) => parse_artifact(p, field, "table"),
        (None, Some(r)) => {
            let scores = scores_from_ranking(r).map_err(|e| CliError::Config(format!("inputs.ranking: {e}")))?;
            Ok(ImportanceTable::new(scores, Metric::S2Kl, direction, MixerKind::Gla, 0)?)
        }
        (None, None) => Err(CliError::Config(format!("inputs.{field}: a table or an inline ranking is required"))),
    }
}

fn load_selection(path: &Path, field: &str) -> Result<Selection, CliError> {
    parse_artifact(path, field, "selection")
}

/// Held-out batches of `task` used for every accuracy figure.
fn eval_batches(cfg: &RunConfig, task: &TaskSpec) -> Result<Vec<TaskBatch>, CliError> {
    Ok(BatchStream::single(task, EVAL_CHUNK, derive_seed(cfg.seed, &[tag("eval")]), Partition::Heldout)?
        .take_sequences(cfg.eval.sequences, EVAL_CHUNK))
}

/// Held-out accuracy on every configured task, keyed by task label.
fn accuracy_report(cfg: &RunConfig, model: &Model) -> Result<Map<String, Value>, CliError> {
    let mut out = Map::new();
    for (i, t) in cfg.tasks.iter().enumerate() {
        let acc = eval_accuracy(model, &eval_batches(cfg, &t.task)?)?;
        let key = if out.contains_key(t.task.label()) {
            format!("{}#{i}", t.task.label())
        } else {
            t.task.label().to_string()
        };
        out.insert(key, acc.into());
    }
    Ok(out)
}

fn is_recall(k: &TaskKind) -> bool {
    matches!(k, TaskKind::KvRecall { .. })
}

fn is_local(k: &TaskKind) -> bool {
    matches!(k, TaskKind::LocalCopy { .. })
}

fn eval_sets(cfg: &RunConfig, stream: &BatchStream) -> Result<EvalSets, CliError> {
    let batches = |t: Option<&TaskSpec>| -> Result<Vec<TaskBatch>, CliError> {
        t.map_or(Ok(Vec::new()), |t| eval_batches(cfg, t))
    };
    Ok(EvalSets {
        recall: batches(cfg.task_of(is_recall))?,
        local: batches(cfg.task_of(is_local))?,
        kl: heldout_slice(stream),
    })
}

fn circuit_error(e: hybrid_distill::Error) -> CliError {
    CliError::Config(format!("teacher: {e}"))
}

/// The configured teacher: `inputs.teacher` when given, otherwise built from
/// the `teacher` section. Training happens only in `train-teacher`.
fn obtain_teacher(cfg: &RunConfig) -> Result<Model, CliError> {
    if cfg.inputs.teacher.is_some() {
        return load_model(&cfg.inputs.teacher, "teacher");
    }
    match &cfg.teacher {
        Some(TeacherConfig::Trained { .. }) => Err(CliError::Config(
            "inputs.teacher: a trained teacher must come from a train-teacher checkpoint".into(),
        )),
        Some(_) => Ok(build_teacher(cfg)?.0),
        None => Err(CliError::Config("inputs.teacher: required when no teacher section is given".into())),
    }
}

/// Teacher plus the supervised curve when it was trained.
fn build_teacher(cfg: &RunConfig) -> Result<(Model, Option<StageReport>), CliError> {
    let Some(teacher) = &cfg.teacher else {
        return Err(CliError::Config("teacher: section required by this command".into()));
    };
    let mut model = match teacher {
        TeacherConfig::CircuitPlanted {
            n_layers,
            planted,
            vocab,
            seq_len,
        } => {
            let p = planted.unwrap_or_else(|| planted_position(cfg.seed, *n_layers));
            planted_recall_teacher(*n_layers, p, *vocab, *seq_len).map_err(circuit_error)?
        }
        TeacherConfig::CircuitRecallCopy {
            n_layers,
            shift_layer,
            match_layer,
            copy_offset,
            vocab,
            seq_len,
        } => recall_copy_teacher(*n_layers, *shift_layer, *match_layer, *copy_offset, *vocab, *seq_len)
            .map_err(circuit_error)?,
        TeacherConfig::Checkpoint { path } => load_checkpoint(path)
            .map_err(|e| CliError::Config(format!("teacher.path: {}: {e}", path.display())))?,
        TeacherConfig::Trained {
            n_layers,
            d_model,
            heads,
            ffn_mult,
            planted,
            linear,
            token_budget,
            batch_size,
            learning_rate,
            ..
        } => {
            let first = cfg
                .tasks
                .first()
                .ok_or_else(|| CliError::Config("tasks: a trained teacher needs a task mixture".into()))?;
            let mut spec = ModelSpec::uniform(
                *n_layers,
                *d_model,
                *heads,
                first.task.vocab,
                first.task.seq_len,
                MixerKind::Softmax,
            );
            spec.ffn_mult = *ffn_mult;
            if let Some(p) = planted {
                if *p >= *n_layers {
                    return Err(CliError::Config(format!("teacher.planted: {p} is not below n_layers = {n_layers}")));
                }
                spec.mixers = (0..*n_layers).map(|l| if l == *p { MixerKind::Softmax } else { *linear }).collect();
            }
            spec.validate().map_err(|e| CliError::Config(format!("teacher: {e}")))?;
            let mut rng = rng_for(cfg.seed, &[tag("teacher-init")]);
            let mut model = Model::init(spec, cfg.seed, &mut rng)?;
            if let Some(p) = planted {
                model.provenance.notes.insert("planted_layer".into(), p.to_string());
            }
            let sup = SupervisedConfig {
                token_budget: *token_budget,
                seq_len: first.task.seq_len,
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                seed: derive_seed(cfg.seed, &[tag("teacher")]),
                optimizer: Default::default(),
            };
            let mix: Vec<(TaskSpec, f64)> = cfg.tasks.iter().map(|t| (t.task.clone(), t.weight)).collect();
            let stream = BatchStream::new(&mix, *batch_size, derive_seed(cfg.seed, &[tag("data")]), Partition::Train)
                .map_err(|e| CliError::Config(format!("tasks: {e}")))?;
            let report = train_supervised(&mut model, &stream, &sup)?;
            return Ok((model, Some(report)));
        }
    };
    model.provenance.seed = cfg.seed;
    Ok((model, None))
}

#[derive(Serialize)]
pub struct TeacherMetrics {
    pub checkpoint: PathBuf,
    pub mixers: Vec<String>,
    pub planted_layer: Option<usize>,
    pub param_count: usize,
    pub accuracy: Map<String, Value>,
    pub target_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

pub fn train_teacher(cfg: &RunConfig) -> Result<TeacherMetrics, CliError> {
    let out = Out::new(cfg)?;
    let (model, report) = build_teacher(cfg)?;
    let accuracy = if cfg.tasks.is_empty() { Map::new() } else { accuracy_report(cfg, &model)? };
    let target = match &cfg.teacher {
        Some(TeacherConfig::Trained { target_accuracy, .. }) => Some(*target_accuracy),
        _ => None,
    };
    if let Some(r) = &report {
        out.curve("teacher_curve.csv", r)?;
    }
    let checkpoint = out.checkpoint("teacher.ckpt", &model, cfg, "train-teacher")?;
    let metrics = TeacherMetrics {
        checkpoint,
        mixers: model.spec.mixers.iter().map(|k| k.label()).collect(),
        planted_layer: model.provenance.notes.get("planted_layer").and_then(|s| s.parse().ok()),
        param_count: model.param_count(),
        accuracy,
        target_accuracy: target,
        final_loss: report.as_ref().and_then(|r| r.final_loss()),
    };
    out.json("teacher.json", cfg, "train-teacher", &metrics)?;
    if let Some(t) = target {
        // The target applies to the first task of the mixture.
        let reached = metrics.accuracy.values().next().and_then(Value::as_f64).unwrap_or(0.0);
        if reached < t {
            return Err(CliError::Runtime(format!(
                "teacher reached accuracy {reached:.4} below the target {t} within its budget; metrics in {}",
                out.path("teacher.json").display()
            )));
        }
    }
    Ok(metrics)
}

#[derive(Serialize)]
pub struct AllLinearReport {
    pub aligned: PathBuf,
    pub all_linear: PathBuf,
    pub stage1: (Option<f64>, Option<f64>),
    pub stage2: (Option<f64>, Option<f64>),
    pub heldout_kl: f64,
    pub accuracy: Map<String, Value>,
}

pub fn distill_all_linear_cmd(cfg: &RunConfig) -> Result<AllLinearReport, CliError> {
    let teacher = obtain_teacher(cfg)?;
    let stream = cfg.stream()?;
    let (s1, s2) = cfg.stage_configs()?;
    let out = Out::new(cfg)?;
    let (aligned, all_linear, reports) = distill_all_linear(&teacher, cfg.scoring.probe, &stream, &s1, &s2)?;
    out.curve("stage1.csv", &reports[0])?;
    out.curve("stage2.csv", &reports[1])?;
    let report = AllLinearReport {
        aligned: out.checkpoint("aligned.ckpt", &aligned, cfg, "distill-all-linear")?,
        all_linear: out.checkpoint("all_linear.ckpt", &all_linear, cfg, "distill-all-linear")?,
        stage1: (reports[0].initial_loss(), reports[0].final_loss()),
        stage2: (reports[1].initial_loss(), reports[1].final_loss()),
        heldout_kl: evaluate_kl(&all_linear, &teacher, &heldout_slice(&stream), DEFAULT_TAU)?,
        accuracy: accuracy_report(cfg, &all_linear)?,
    };
    out.json("all_linear.json", cfg, "distill-all-linear", &report)?;
    Ok(report)
}

#[derive(Serialize)]
pub struct ScoreReport {
    pub table: ImportanceTable,
    pub ranking: Vec<usize>,
    pub stability: Option<StabilityReport>,
}

#[derive(Serialize)]
pub struct StabilityReport {
    pub diagnostics: Vec<hybrid_distill::select::StabilityDiagnostics>,
    pub early_stop_step: Option<usize>,
}

pub fn score_layers(cfg: &RunConfig) -> Result<ScoreReport, CliError> {
    let teacher = obtain_teacher(cfg)?;
    let all_linear = match cfg.scoring.direction {
        Direction::Ga => Some(load_model(&cfg.inputs.all_linear, "all_linear")?),
        _ => None,
    };
    let stream = cfg.stream()?;
    let scoring = cfg.scoring_config()?;
    let out = Out::new(cfg)?;
    let (table, traces) = score_all_layers(all_linear.as_ref(), &teacher, &stream, &scoring, cfg.workers)?;
    for t in &traces {
        out.json(&format!("scoring/layer_{:03}.json", t.layer), cfg, "score-layers", t)?;
    }
    let stability = match (&cfg.stability, scoring.snapshot_every) {
        (Some(s), every) if every > 0 => {
            let snaps = snapshots_from_traces(&traces, s.k)?;
            let (diagnostics, early_stop_step) = early_stop_step(&s.config(), &snaps)?;
            Some(StabilityReport {
                diagnostics,
                early_stop_step,
            })
        }
        _ => None,
    };
    table.write_csv(fs::File::create(out.path("importance.csv"))?)?;
    let report = ScoreReport {
        ranking: table.ranking(),
        table,
        stability,
    };
    out.json("importance.json", cfg, "score-layers", &report)?;
    Ok(report)
}

#[derive(Serialize)]
pub struct SelectReport {
    pub selection: Selection,
    /// Bypass table behind a `bypass` selection.
    pub table: Option<ImportanceTable>,
}

pub fn select(cfg: &RunConfig) -> Result<SelectReport, CliError> {
    let s = cfg.require_selection()?;
    let i = &cfg.inputs;
    let mut params = Map::new();
    params.insert("k".into(), s.k.into());
    let conf = |e: hybrid_distill::Error| CliError::Config(format!("selection: {e}"));
    let (strategy, n, layers, table): (String, usize, Vec<usize>, Option<ImportanceTable>) = match s.strategy {
        Strategy::TopK => {
            let t = load_table(&i.table, &i.ranking, "table", Direction::Ga)?;
            select_top_k(&t, s.k).map_err(conf)?;
            (format!("top_k_{}", t.direction), t.n_layers(), t.ranking()[..s.k].to_vec(), None)
        }
        Strategy::AvgRank => {
            let ga = load_table(&i.table, &i.ranking, "table", Direction::Ga)?;
            let gr = load_table(&i.table_gr, &i.ranking_gr, "table_gr", Direction::Gr)?;
            let set = avg_rank_select(&ga.ranking(), &gr.ranking(), s.k).map_err(conf)?;
            ("avg_rank".into(), ga.n_layers(), set.into_iter().collect(), None)
        }
        Strategy::Uniform => {
            let n = match (s.n_layers, &i.table, &i.ranking) {
                (Some(n), _, _) => n,
                (None, None, None) => {
                    return Err(CliError::Config("selection.n_layers: required without an input table".into()))
                }
                _ => load_table(&i.table, &i.ranking, "table", Direction::Ga)?.n_layers(),
            };
            ("uniform".into(), n, uniform_select(n, s.k).map_err(conf)?.into_iter().collect(), None)
        }
        Strategy::DistanceRegularized => {
            let t = load_table(&i.table, &i.ranking, "table", Direction::Ga)?;
            params.insert("lambda".into(), s.lambda.into());
            params.insert("sigma".into(), s.sigma.into());
            let layers = distance_regularized_select(&t, s.k, s.lambda, s.sigma).map_err(conf)?;
            ("distance_regularized".into(), t.n_layers(), layers, None)
        }
        Strategy::Bypass => {
            let metric = s.bypass_metric.expect("validated");
            let bm = BypassMetric::try_from(metric).map_err(|e| CliError::Config(format!("selection.bypass_metric: {e}")))?;
            let teacher = obtain_teacher(cfg)?;
            let batches = |pred: fn(&TaskKind) -> bool| -> Result<Vec<TaskBatch>, CliError> {
                cfg.task_of(pred).map_or(Ok(Vec::new()), |t| eval_batches(cfg, t))
            };
            let probe = ProbeData {
                generic: batches(|k| matches!(k, TaskKind::GenericLm { .. }))?,
                recall: batches(is_recall)?,
            };
            let t = bypass_table(&teacher, bm, &probe, cfg.seed)?;
            select_top_k(&t, s.k).map_err(conf)?;
            params.insert("bypass_metric".into(), metric.label().into());
            (format!("bypass_{}", metric.label()), t.n_layers(), t.ranking()[..s.k].to_vec(), Some(t))
        }
    };
    let mut selection = Selection::new(&strategy, n, layers).map_err(conf)?;
    selection.params = params;
    let out = Out::new(cfg)?;
    let report = SelectReport { selection, table };
    out.json("selection.json", cfg, "select", &report)?;
    Ok(report)
}

#[derive(Serialize)]
pub struct HybridReport {
    pub checkpoint: PathBuf,
    pub softmax_layers: Vec<usize>,
    pub heldout_kl: f64,
    pub recall_accuracy: Option<f64>,
    pub local_accuracy: Option<f64>,
    pub accuracy: Map<String, Value>,
    pub stage2: (Option<f64>, Option<f64>),
}

pub fn distill_hybrid(cfg: &RunConfig) -> Result<HybridReport, CliError> {
    let teacher = obtain_teacher(cfg)?;
    let aligned = load_model(&cfg.inputs.aligned, "aligned")?;
    let selection = load_selection(input(&cfg.inputs.selection, "selection")?, "selection")?;
    let layout = HybridLayout::new(aligned.n_layers(), selection.set())
        .map_err(|e| CliError::Config(format!("inputs.selection: {e}")))?;
    let stream = cfg.stream()?;
    let final_cfg = cfg.final_stage()?;
    let out = Out::new(cfg)?;
    let (hybrid, r) = final_hybrid_distill(&layout, &aligned, &teacher, &stream, &final_cfg)?;
    out.curve("final.csv", &r)?;
    let evals = eval_sets(cfg, &stream)?;
    let acc = |b: &[TaskBatch]| -> Result<Option<f64>, CliError> {
        if b.is_empty() {
            Ok(None)
        } else {
            Ok(Some(eval_accuracy(&hybrid, b)?))
        }
    };
    let report = HybridReport {
        checkpoint: out.checkpoint("hybrid.ckpt", &hybrid, cfg, "distill-hybrid")?,
        softmax_layers: layout.softmax().iter().copied().collect(),
        heldout_kl: evaluate_kl(&hybrid, &teacher, &evals.kl, DEFAULT_TAU)?,
        recall_accuracy: acc(&evals.recall)?,
        local_accuracy: acc(&evals.local)?,
        accuracy: accuracy_report(cfg, &hybrid)?,
        stage2: (r.initial_loss(), r.final_loss()),
    };
    out.json("hybrid.json", cfg, "distill-hybrid", &report)?;
    Ok(report)
}

fn write_sweep_csv(path: &Path, column: &str, result: &SweepResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let io = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record([column, "recall_acc", "local_acc", "heldout_kl", "softmax_layers"]).map_err(io)?;
    for p in &result.points {
        let layers: Vec<String> = p.softmax_layers.iter().map(|l| l.to_string()).collect();
        w.write_record([
            p.x.to_string(),
            p.recall.to_string(),
            p.local.to_string(),
            p.kl.to_string(),
            layers.join(";"),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep_k(cfg: &RunConfig) -> Result<SweepResult, CliError> {
    if cfg.sweep.ks.is_empty() {
        return Err(CliError::Config("sweep.ks: at least one K is required".into()));
    }
    let teacher = obtain_teacher(cfg)?;
    if let Some(&k) = cfg.sweep.ks.iter().find(|&&k| k > teacher.n_layers()) {
        return Err(CliError::Config(format!("sweep.ks: {k} exceeds {} layers", teacher.n_layers())));
    }
    let stream = cfg.stream()?;
    let evals = eval_sets(cfg, &stream)?;
    let budgets = cfg.require_budgets()?;
    let out = Out::new(cfg)?;
    let result = run_sweep_k(&teacher, &stream, &evals, budgets, &cfg.sweep.ks, cfg.seed, cfg.workers)?;
    write_sweep_csv(&out.path("sweep_k.csv"), "k", &result)?;
    out.json("sweep_k.json", cfg, "sweep-k", &result)?;
    Ok(result)
}

pub fn sweep_window(cfg: &RunConfig) -> Result<SweepResult, CliError> {
    if cfg.sweep.windows.is_empty() {
        return Err(CliError::Config("sweep.windows: at least one window is required".into()));
    }
    let teacher = obtain_teacher(cfg)?;
    let stream = cfg.stream()?;
    let evals = eval_sets(cfg, &stream)?;
    let budgets = cfg.require_budgets()?;
    let out = Out::new(cfg)?;
    let result = run_sweep_window(&teacher, &stream, &evals, budgets, &cfg.sweep.windows, cfg.seed)?;
    write_sweep_csv(&out.path("sweep_window.csv"), "window", &result)?;
    out.json("sweep_window.json", cfg, "sweep-window", &result)?;
    Ok(result)
}

/// Snapshots from a `score-layers` output directory (its per-layer traces)
/// or from a JSON list.
fn load_snapshots(path: &Path, k: usize) -> Result<Vec<SelectionSnapshot>, CliError> {
    let conf = |e: String| CliError::Config(format!("inputs.snapshots: {}: {e}", path.display()));
    if path.is_dir() {
        let dir = path.join("scoring");
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| conf(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut traces: Vec<ScoreTrace> = files
            .iter()
            .map(|f| parse_artifact(f, "snapshots", "trace"))
            .collect::<Result<_, _>>()?;
        traces.sort_by_key(|t| t.layer);
        snapshots_from_traces(&traces, k).map_err(|e| conf(e.to_string()))
    } else {
        parse_artifact(path, "snapshots", "snapshots")
    }
}

pub fn analyze_stability(cfg: &RunConfig) -> Result<StabilityReport, CliError> {
    let s = cfg
        .stability
        .as_ref()
        .ok_or_else(|| CliError::Config("stability: section required by this command".into()))?;
    let snaps = load_snapshots(input(&cfg.inputs.snapshots, "snapshots")?, s.k)?;
    let out = Out::new(cfg)?;
    let (diagnostics, early_stop_step) = early_stop_step(&s.config(), &snaps)?;
    let mut w = csv::Writer::from_path(out.path("stability.csv")).map_err(|e| CliError::Runtime(e.to_string()))?;
    for d in &diagnostics {
        w.serialize(d).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    let report = StabilityReport {
        diagnostics,
        early_stop_step,
    };
    out.json("stability.json", cfg, "analyze-stability", &report)?;
    Ok(report)
}

#[derive(Serialize)]
pub struct AdjacencyEntry {
    pub source: PathBuf,
    pub strategy: String,
    pub layers: BTreeSet<usize>,
    pub adjacency: usize,
    pub expected_adjacency: f64,
}

#[derive(Serialize)]
pub struct AdjacencyReport {
    pub selections: Vec<AdjacencyEntry>,
    /// Pairwise Jaccard agreement, row-major.
    pub jaccard: Vec<Vec<f64>>,
}

pub fn analyze_adjacency(cfg: &RunConfig) -> Result<AdjacencyReport, CliError> {
    let paths: Vec<PathBuf> = cfg.inputs.selection.iter().chain(&cfg.inputs.selections).cloned().collect();
    if paths.is_empty() {
        return Err(CliError::Config("inputs.selection: at least one selection is required".into()));
    }
    let mut entries = Vec::with_capacity(paths.len());
    for p in paths {
        let sel = load_selection(&p, "selections")?;
        let layers = sel.set();
        let conf = |e: hybrid_distill::Error| CliError::Config(format!("inputs.selections: {}: {e}", p.display()));
        entries.push(AdjacencyEntry {
            strategy: sel.strategy.clone(),
            adjacency: adjacency_index(&layers, sel.n_layers).map_err(conf)?,
            expected_adjacency: expected_adjacency(layers.len(), sel.n_layers).map_err(conf)?,
            layers,
            source: p,
        });
    }
    let jaccard_matrix = entries
        .iter()
        .map(|a| entries.iter().map(|b| jaccard(&a.layers, &b.layers)).collect())
        .collect();
    let out = Out::new(cfg)?;
    let report = AdjacencyReport {
        selections: entries,
        jaccard: jaccard_matrix,
    };
    out.json("adjacency.json", cfg, "analyze-adjacency", &report)?;
    Ok(report)
}
