//! Synthetic data: a Markov/Zipf text proxy, key-value recall, multi-hop
//! recall and a local copy task, plus evaluation helpers.
//!
//! Token layout shared by the synthetic tasks: `0` is padding, `1` is the
//! query separator and content tokens start at `2`. Recall tasks draw keys
//! from `[2, 2 + key_vocab)` and values from the next `value_vocab` ids, so
//! chance accuracy is exactly `1 / value_vocab`.

mod corpus;
mod markov;

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::seed::{rng_for, tag};
use crate::tensor::Tensor;

pub use corpus::ByteCorpus;
pub use markov::MarkovLm;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const FIRST_CONTENT: usize = 2;

/// `batch` sequences of `seq_len` tokens laid out back to back.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    /// `-1` where a position is not supervised.
    pub targets: Vec<i64>,
    pub query_mask: Vec<bool>,
}

impl TaskBatch {
    fn from_sequences(seqs: Vec<Sequence>, seq_len: usize) -> Self {
        let batch = seqs.len();
        let mut tokens = Vec::with_capacity(batch * seq_len);
        let mut targets = Vec::with_capacity(batch * seq_len);
        for s in seqs {
            tokens.extend(s.tokens);
            targets.extend(s.targets);
        }
        let query_mask = targets.iter().map(|&t| t >= 0).collect();
        TaskBatch {
            batch,
            seq_len,
            tokens,
            targets,
            query_mask,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let n = self.batch * self.seq_len;
        if self.tokens.len() != n || self.targets.len() != n || self.query_mask.len() != n {
            return Err(invalid("task batch buffers disagree with batch x seq_len"));
        }
        if let Some(&id) = self.tokens.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        for (&t, &m) in self.targets.iter().zip(&self.query_mask) {
            if (t >= 0) != m || t >= vocab as i64 || t < -1 {
                return Err(invalid(format!("inconsistent target {t} (mask {m})")));
            }
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.query_mask.iter().filter(|&&m| m).count()
    }

    /// Tokens of sequence `b`.
    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn sequence_targets(&self, b: usize) -> &[i64] {
        &self.targets[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// One JSON object per sequence.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            tokens: &'a [usize],
            targets: &'a [i64],
            query_mask: &'a [bool],
        }
        for b in 0..self.batch {
            let r = b * self.seq_len..(b + 1) * self.seq_len;
            serde_json::to_writer(
                &mut w,
                &Line {
                    tokens: &self.tokens[r.clone()],
                    targets: &self.targets[r.clone()],
                    query_mask: &self.query_mask[r],
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Task family and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Order-`order` Markov chain whose next-token law is a context-specific
    /// permutation of a Zipf law over `alphabet` tokens, with occasional
    /// verbatim repeats of earlier spans. Every position is supervised.
    GenericLm {
        alphabet: usize,
        order: usize,
        zipf_exponent: f64,
        repeat_prob: f64,
        repeat_len: usize,
    },
    /// `k1 v1 ... kn vn (SEP q)*`, left padded; each query is supervised at
    /// its key position with the key's value.
    KvRecall {
        pairs: usize,
        queries: usize,
        key_vocab: usize,
        value_vocab: usize,
    },
    /// Alias chains `x0 -> x1 -> ... -> value` stored as shuffled pairs;
    /// queries name `x0` and expect the terminal value.
    MultiHopRecall {
        chains: usize,
        hops: usize,
        queries: usize,
        key_vocab: usize,
        value_vocab: usize,
    },
    /// Random tokens; position `t >= window` must emit token `t - window`.
    LocalCopy { window: usize, alphabet: usize },
}

/// A task with its vocabulary, length and generator seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    /// Validated constructor.
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let spec = TaskSpec {
            kind,
            vocab,
            seq_len,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kv_recall(pairs: usize, queries: usize, key_vocab: usize, value_vocab: usize, vocab: usize, seq_len: usize) -> Result<Self> {
        Self::new(
            TaskKind::KvRecall {
                pairs,
                queries,
                key_vocab,
                value_vocab,
            },
            vocab,
            seq_len,
            0,
        )
    }

    pub fn local_copy(window: usize, alphabet: usize, vocab: usize, seq_len: usize) -> Result<Self> {
        Self::new(TaskKind::LocalCopy { window, alphabet }, vocab, seq_len, 0)
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            TaskKind::GenericLm { .. } => "generic_lm",
            TaskKind::KvRecall { .. } => "kv_recall",
            TaskKind::MultiHopRecall { .. } => "multihop_recall",
            TaskKind::LocalCopy { .. } => "local_copy",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |msg: String| Err(Error::InfeasibleTask(msg));
        let (t, v) = (self.seq_len, self.vocab);
        if t < 2 {
            return infeasible(format!("sequence length {t} is too short"));
        }
        let content = v.saturating_sub(FIRST_CONTENT);
        match self.kind {
            TaskKind::GenericLm {
                alphabet,
                order,
                zipf_exponent,
                repeat_prob,
                repeat_len,
            } => {
                if alphabet < 2 || alphabet > content {
                    return infeasible(format!("alphabet {alphabet} does not fit vocab {v}"));
                }
                if order == 0 || alphabet.checked_pow(order as u32).is_none_or(|n| n > 1 << 20) {
                    return infeasible(format!("order {order} over {alphabet} tokens is unsupported"));
                }
                if !(zipf_exponent >= 0.0) || !(0.0..1.0).contains(&repeat_prob) {
                    return infeasible("zipf exponent must be >= 0 and repeat_prob in [0, 1)".into());
                }
                if repeat_prob > 0.0 && (repeat_len == 0 || 2 * repeat_len >= t) {
                    return infeasible(format!("repeat length {repeat_len} does not fit length {t}"));
                }
            }
            TaskKind::KvRecall {
                pairs,
                queries,
                key_vocab,
                value_vocab,
            } => {
                Self::check_recall(pairs, 1, queries, key_vocab, value_vocab, t, content)?;
            }
            TaskKind::MultiHopRecall {
                chains,
                hops,
                queries,
                key_vocab,
                value_vocab,
            } => {
                if hops == 0 {
                    return infeasible("hop count must be at least 1".into());
                }
                Self::check_recall(chains, hops, queries, key_vocab, value_vocab, t, content)?;
            }
            TaskKind::LocalCopy { window, alphabet } => {
                if window == 0 || window >= t {
                    return infeasible(format!("copy window {window} must lie in [1, {t})"));
                }
                if alphabet < 2 || alphabet > content {
                    return infeasible(format!("alphabet {alphabet} does not fit vocab {v}"));
                }
            }
        }
        Ok(())
    }

    fn check_recall(chains: usize, hops: usize, queries: usize, key_vocab: usize, value_vocab: usize, t: usize, content: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleTask(m));
        if chains == 0 || queries == 0 {
            return bad("need at least one pair and one query".into());
        }
        if key_vocab + value_vocab > content || value_vocab == 0 {
            return bad(format!(
                "{key_vocab} keys + {value_vocab} values exceed {content} content tokens"
            ));
        }
        if chains * hops > key_vocab {
            return bad(format!("{} distinct keys needed, only {key_vocab} available", chains * hops));
        }
        if 2 * chains * hops + 2 * queries > t {
            return bad(format!(
                "{} pairs and {queries} queries need {} positions, have {t}",
                chains * hops,
                2 * chains * hops + 2 * queries
            ));
        }
        Ok(())
    }

    /// First value id of a recall task.
    pub fn value_offset(&self) -> Option<usize> {
        match self.kind {
            TaskKind::KvRecall { key_vocab, .. } | TaskKind::MultiHopRecall { key_vocab, .. } => {
                Some(FIRST_CONTENT + key_vocab)
            }
            _ => None,
        }
    }
}

struct Sequence {
    tokens: Vec<usize>,
    targets: Vec<i64>,
}

/// A validated spec ready to sample from.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: TaskSpec,
    markov: Option<MarkovLm>,
}

impl Generator {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let markov = match spec.kind {
            TaskKind::GenericLm {
                alphabet,
                order,
                zipf_exponent,
                ..
            } => Some(MarkovLm::new(alphabet, order, zipf_exponent, spec.vocab, spec.seed)?),
            _ => None,
        };
        Ok(Generator {
            spec: spec.clone(),
            markov,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn markov(&self) -> Option<&MarkovLm> {
        self.markov.as_ref()
    }

    fn sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        let t = self.spec.seq_len;
        match self.spec.kind {
            TaskKind::GenericLm {
                repeat_prob,
                repeat_len,
                ..
            } => {
                let lm = self.markov.as_ref().expect("built for generic LM");
                let tokens = lm.sample(t, repeat_prob, repeat_len, rng);
                let mut targets: Vec<i64> = tokens[1..].iter().map(|&x| x as i64).collect();
                targets.push(-1);
                Sequence { tokens, targets }
            }
            TaskKind::KvRecall {
                pairs,
                queries,
                key_vocab,
                value_vocab,
            } => chains_sequence(pairs, 1, queries, key_vocab, value_vocab, t, rng),
            TaskKind::MultiHopRecall {
                chains,
                hops,
                queries,
                key_vocab,
                value_vocab,
            } => chains_sequence(chains, hops, queries, key_vocab, value_vocab, t, rng),
            TaskKind::LocalCopy { window, alphabet } => {
                let tokens: Vec<usize> = (0..t)
                    .map(|_| FIRST_CONTENT + rng.random_range(0..alphabet))
                    .collect();
                let targets = (0..t)
                    .map(|i| if i >= window { tokens[i - window] as i64 } else { -1 })
                    .collect();
                Sequence { tokens, targets }
            }
        }
    }

    /// `batch` sequences drawn from `rng`.
    pub fn batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> TaskBatch {
        let seqs = (0..batch).map(|_| self.sequence(rng)).collect();
        TaskBatch::from_sequences(seqs, self.spec.seq_len)
    }
}

fn chains_sequence<R: Rng + ?Sized>(
    chains: usize,
    hops: usize,
    queries: usize,
    key_vocab: usize,
    value_vocab: usize,
    t: usize,
    rng: &mut R,
) -> Sequence {
    let keys: Vec<usize> = index::sample(rng, key_vocab, chains * hops)
        .into_iter()
        .map(|k| FIRST_CONTENT + k)
        .collect();
    let value_base = FIRST_CONTENT + key_vocab;
    let mut edges = Vec::with_capacity(chains * hops);
    let mut terminal = Vec::with_capacity(chains);
    for c in 0..chains {
        let nodes = &keys[c * hops..(c + 1) * hops];
        let value = value_base + rng.random_range(0..value_vocab);
        for w in nodes.windows(2) {
            edges.push((w[0], w[1]));
        }
        edges.push((nodes[hops - 1], value));
        terminal.push((nodes[0], value));
    }
    edges.shuffle(rng);
    let used = 2 * edges.len() + 2 * queries;
    let mut tokens = vec![PAD; t - used];
    let mut targets = vec![-1; t - used + 2 * edges.len()];
    for (a, b) in edges {
        tokens.extend([a, b]);
    }
    // Queries walk shuffled rounds over the chains, so a key repeats only
    // after every chain has been asked once.
    let mut order: Vec<usize> = Vec::with_capacity(queries + chains);
    while order.len() < queries {
        let mut round: Vec<usize> = (0..chains).collect();
        round.shuffle(rng);
        order.extend(round);
    }
    for &c in &order[..queries] {
        let (start, value) = terminal[c];
        tokens.extend([SEP, start]);
        targets.extend([-1, value as i64]);
    }
    Sequence { tokens, targets }
}

/// Answers every query of a recall batch by following the stored pairs.
pub fn recall_oracle(batch: &TaskBatch) -> Vec<i64> {
    let mut out = vec![-1; batch.tokens.len()];
    for b in 0..batch.batch {
        let seq = batch.sequence(b);
        let mut map = std::collections::HashMap::new();
        let mut i = 0;
        while i + 1 < seq.len() && seq[i] != SEP {
            if seq[i] != PAD {
                map.insert(seq[i], seq[i + 1]);
                i += 2;
            } else {
                i += 1;
            }
        }
        for t in 1..seq.len() {
            if seq[t - 1] == SEP {
                let mut x = seq[t];
                while let Some(&next) = map.get(&x) {
                    x = next;
                }
                out[b * batch.seq_len + t] = x as i64;
            }
        }
    }
    out
}

/// Which half of a seed namespace a stream draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Heldout,
}

impl Partition {
    fn tag(self) -> u64 {
        match self {
            Partition::Train => tag("train"),
            Partition::Heldout => tag("heldout"),
        }
    }
}

/// Deterministic, indexable stream of batches from a weighted task mixture.
/// Batch `i` depends only on `(seed, partition, i)`.
#[derive(Clone, Debug)]
pub struct BatchStream {
    generators: Vec<Generator>,
    weights: WeightedIndex<f64>,
    batch_size: usize,
    seed: u64,
    partition: Partition,
}

impl BatchStream {
    pub fn new(components: &[(TaskSpec, f64)], batch_size: usize, seed: u64, partition: Partition) -> Result<Self> {
        if components.is_empty() || batch_size == 0 {
            return Err(invalid("a stream needs at least one task and a positive batch size"));
        }
        let seq_len = components[0].0.seq_len;
        let vocab = components[0].0.vocab;
        if components.iter().any(|(s, _)| s.seq_len != seq_len || s.vocab != vocab) {
            return Err(invalid("all tasks of a mixture must share seq_len and vocab"));
        }
        let weights = WeightedIndex::new(components.iter().map(|(_, w)| *w))
            .map_err(|e| invalid(format!("bad mixture weights: {e}")))?;
        let generators = components
            .iter()
            .map(|(s, _)| Generator::new(s))
            .collect::<Result<_>>()?;
        Ok(BatchStream {
            generators,
            weights,
            batch_size,
            seed,
            partition,
        })
    }

    /// Single-task stream.
    pub fn single(spec: &TaskSpec, batch_size: usize, seed: u64, partition: Partition) -> Result<Self> {
        Self::new(&[(spec.clone(), 1.0)], batch_size, seed, partition)
    }

    pub fn seq_len(&self) -> usize {
        self.generators[0].spec.seq_len
    }

    pub fn vocab(&self) -> usize {
        self.generators[0].spec.vocab
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    /// Same mixture drawn from another seed.
    pub fn reseed(&self, seed: u64) -> Self {
        BatchStream { seed, ..self.clone() }
    }

    pub fn with_partition(&self, partition: Partition) -> Self {
        BatchStream {
            partition,
            ..self.clone()
        }
    }

    /// The first `n_seqs` sequences of the stream, regrouped into batches of
    /// at most `chunk` sequences.
    pub fn take_sequences(&self, n_seqs: usize, chunk: usize) -> Vec<TaskBatch> {
        let n_batches = n_seqs.div_ceil(self.batch_size);
        let all = merge((0..n_batches as u64).map(|i| self.batch(i)).collect());
        let t = all.seq_len;
        (0..n_seqs)
            .step_by(chunk.max(1))
            .map(|start| {
                let end = (start + chunk.max(1)).min(n_seqs);
                TaskBatch {
                    batch: end - start,
                    seq_len: t,
                    tokens: all.tokens[start * t..end * t].to_vec(),
                    targets: all.targets[start * t..end * t].to_vec(),
                    query_mask: all.query_mask[start * t..end * t].to_vec(),
                }
            })
            .collect()
    }

    pub fn batch(&self, index: u64) -> TaskBatch {
        let mut rng = rng_for(self.seed, &[self.partition.tag(), index]);
        let seqs = (0..self.batch_size)
            .map(|_| {
                let g = &self.generators[self.weights.sample(&mut rng)];
                g.sequence(&mut rng)
            })
            .collect();
        TaskBatch::from_sequences(seqs, self.seq_len())
    }

    /// Batches `0..n` merged into one batch of `n * batch_size` sequences.
    pub fn slice(&self, n: usize) -> TaskBatch {
        merge((0..n as u64).map(|i| self.batch(i)).collect())
    }
}

/// Concatenates batches with equal sequence length.
pub fn merge(batches: Vec<TaskBatch>) -> TaskBatch {
    let seq_len = batches.first().map_or(0, |b| b.seq_len);
    let mut out = TaskBatch {
        batch: 0,
        seq_len,
        tokens: Vec::new(),
        targets: Vec::new(),
        query_mask: Vec::new(),
    };
    for b in batches {
        assert_eq!(b.seq_len, seq_len, "merged batches must share seq_len");
        out.batch += b.batch;
        out.tokens.extend(b.tokens);
        out.targets.extend(b.targets);
        out.query_mask.extend(b.query_mask);
    }
    out
}

/// Anything that maps token sequences to next-token logits.
pub trait LogitSource {
    fn vocab(&self) -> usize;
    /// `(batch * seq_len) x vocab` logits.
    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor>;
}

impl LogitSource for Model {
    fn vocab(&self) -> usize {
        self.spec.vocab
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        Model::logits(self, tokens, batch)
    }
}

/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

fn for_each_chunk(batch: &TaskBatch, mut f: impl FnMut(&[usize], &[i64], usize) -> Result<()>) -> Result<()> {
    let per = EVAL_CHUNK * batch.seq_len;
    for (toks, tgts) in batch.tokens.chunks(per).zip(batch.targets.chunks(per)) {
        f(toks, tgts, toks.len() / batch.seq_len)?;
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of query positions whose arg-max logit equals the target.
pub fn eval_accuracy<M: LogitSource + ?Sized>(model: &M, batches: &[TaskBatch]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for b in batches {
        for_each_chunk(b, |toks, tgts, n| {
            if !tgts.iter().any(|&t| t >= 0) {
                return Ok(());
            }
            let logits = model.logits(toks, n)?;
            for (i, &t) in tgts.iter().enumerate() {
                if t >= 0 {
                    total += 1;
                    hits += (argmax(logits.row(i)) == t as usize) as usize;
                }
            }
            Ok(())
        })?;
    }
    if total == 0 {
        return Err(invalid("no query positions to score"));
    }
    Ok(hits as f64 / total as f64)
}

/// `exp` of the mean next-token cross-entropy over supervised positions.
pub fn eval_perplexity<M: LogitSource + ?Sized>(model: &M, batches: &[TaskBatch]) -> Result<f64> {
    let (mut nll, mut total) = (0.0, 0usize);
    let mut logp = vec![0.0; model.vocab()];
    for b in batches {
        for_each_chunk(b, |toks, tgts, n| {
            if !tgts.iter().any(|&t| t >= 0) {
                return Ok(());
            }
            let logits = model.logits(toks, n)?;
            for (i, &t) in tgts.iter().enumerate() {
                if t >= 0 {
                    crate::autodiff::log_softmax_row(logits.row(i), &mut logp);
                    nll -= logp[t as usize];
                    total += 1;
                }
            }
            Ok(())
        })?;
    }
    if total == 0 {
        return Err(invalid("no supervised positions to score"));
    }
    Ok((nll / total as f64).exp())
}

#[cfg(test)]
mod tests;
