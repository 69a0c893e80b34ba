//! Layer importance tables, selectors, stability monitoring and adjacency
//! diagnostics.

mod scoring;
mod stability;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixers::MixerKind;

pub use scoring::{
    bypass_layer, bypass_score, bypass_table, iterative_removal_ranking, no_swap_baseline, one_swap_importance,
    one_swap_removal_importance, score_all_layers, snapshots_from_traces, BypassMetric, ProbeData, ScoreTrace,
    ScoringConfig,
};
pub use stability::{
    early_stop_step, stability_update, EarlyStopMode, SelectionSnapshot, StabilityConfig, StabilityDiagnostics,
    StabilityState,
};

/// What a score measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "s1-mse")]
    S1Mse,
    #[serde(rename = "s2-kl")]
    S2Kl,
    #[serde(rename = "act-mse")]
    ActMse,
    #[serde(rename = "lm-ppl")]
    LmPpl,
    #[serde(rename = "ar-drop")]
    ArDrop,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::S1Mse => "s1-mse",
            Metric::S2Kl => "s2-kl",
            Metric::ActMse => "act-mse",
            Metric::LmPpl => "lm-ppl",
            Metric::ArDrop => "ar-drop",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::S1Mse, Metric::S2Kl, Metric::ActMse, Metric::LmPpl, Metric::ArDrop]
            .into_iter()
            .find(|m| m.label() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown metric '{s}'")))
    }
}

/// Greedy addition (restore one softmax layer into an all-linear model) or
/// greedy removal (convert one layer of the teacher).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "ga")]
    Ga,
    #[serde(rename = "gr")]
    Gr,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Ga => "ga",
            Direction::Gr => "gr",
            Direction::NotApplicable => "n/a",
        })
    }
}

/// One score per layer; higher means more worth keeping as softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub scores: Vec<f64>,
    pub metric: Metric,
    pub direction: Direction,
    /// Mixer used for the linear layers while scoring.
    pub probe: MixerKind,
    pub seed: u64,
    /// Free-form run facts (budgets, worker count, ...).
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl ImportanceTable {
    pub fn new(scores: Vec<f64>, metric: Metric, direction: Direction, probe: MixerKind, seed: u64) -> Result<Self> {
        if let Some(l) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::ScoringIncomplete {
                layer: l,
                reason: "non-finite score".into(),
            });
        }
        Ok(ImportanceTable {
            scores,
            metric,
            direction,
            probe,
            seed,
            metadata: serde_json::Map::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    /// Layers from most to least important; equal scores go to the lower
    /// index first.
    pub fn ranking(&self) -> Vec<usize> {
        rank_by_score(&self.scores)
    }

    /// `layer,score,metric,direction,probe,seed` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            layer: usize,
            score: f64,
            metric: &'a str,
            direction: String,
            probe: String,
            seed: u64,
        }
        let mut out = csv::Writer::from_writer(w);
        for (layer, &score) in self.scores.iter().enumerate() {
            out.serialize(Row {
                layer,
                score,
                metric: self.metric.label(),
                direction: self.direction.to_string(),
                probe: self.probe.label(),
                seed: self.seed,
            })
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Indices sorted by descending score, ties by lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Scores that reproduce a published ranking: the layer at position `p`
/// gets `-(p as f64)`.
pub fn scores_from_ranking(ranking: &[usize]) -> Result<Vec<f64>> {
    check_permutation(ranking, ranking.len())?;
    let mut scores = vec![0.0; ranking.len()];
    for (p, &l) in ranking.iter().enumerate() {
        scores[l] = -(p as f64);
    }
    Ok(scores)
}

fn check_k(k: usize, n_layers: usize) -> Result<()> {
    if k > n_layers {
        return Err(invalid(format!("cannot pick {k} of {n_layers} layers")));
    }
    Ok(())
}

fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if p.len() != n {
        return Err(invalid(format!("ranking has {} entries, expected {n}", p.len())));
    }
    for &l in p {
        if l >= n || std::mem::replace(&mut seen[l], true) {
            return Err(invalid(format!("ranking is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// The `k` highest-scoring layers.
pub fn select_top_k(table: &ImportanceTable, k: usize) -> Result<BTreeSet<usize>> {
    check_k(k, table.n_layers())?;
    Ok(table.ranking().into_iter().take(k).collect())
}

/// Top `k` by mean rank position across two rankings; ties go to the better
/// position in `ranking_ga`, then the lower index.
pub fn avg_rank_select(ranking_ga: &[usize], ranking_gr: &[usize], k: usize) -> Result<BTreeSet<usize>> {
    let n = ranking_ga.len();
    check_permutation(ranking_ga, n)?;
    check_permutation(ranking_gr, n)?;
    check_k(k, n)?;
    let mut pos_ga = vec![0; n];
    let mut pos_gr = vec![0; n];
    for (p, &l) in ranking_ga.iter().enumerate() {
        pos_ga[l] = p;
    }
    for (p, &l) in ranking_gr.iter().enumerate() {
        pos_gr[l] = p;
    }
    // Sum of positions orders exactly like their mean.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&l| (pos_ga[l] + pos_gr[l], pos_ga[l], l));
    Ok(idx.into_iter().take(k).collect())
}

/// Evenly spaced layers at the centres of `k` equal strides:
/// `floor((2i + 1) L / 2k)` for `i in 0..k`.
pub fn uniform_select(n_layers: usize, k: usize) -> Result<BTreeSet<usize>> {
    check_k(k, n_layers)?;
    Ok((0..k).map(|i| (2 * i + 1) * n_layers / (2 * k)).collect())
}

/// Greedy selection of `k` layers maximising
/// `I(l) - lambda * sum_{j in S} exp(-|l - j| / sigma)`; ties by raw score,
/// then lower index.
pub fn distance_regularized_select(table: &ImportanceTable, k: usize, lambda: f64, sigma: f64) -> Result<Vec<usize>> {
    check_k(k, table.n_layers())?;
    if !(lambda >= 0.0) || !(sigma > 0.0) {
        return Err(invalid(format!("need lambda >= 0 and sigma > 0, got {lambda}, {sigma}")));
    }
    let scores = &table.scores;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    while chosen.len() < k {
        let value = |l: usize| {
            let penalty: f64 = chosen
                .iter()
                .map(|&j| (-(l.abs_diff(j) as f64) / sigma).exp())
                .sum();
            scores[l] - lambda * penalty
        };
        let best = (0..scores.len())
            .filter(|l| !chosen.contains(l))
            .max_by(|&a, &b| {
                value(a)
                    .total_cmp(&value(b))
                    .then(scores[a].total_cmp(&scores[b]))
                    .then(b.cmp(&a))
            })
            .expect("k <= n_layers leaves a candidate");
        chosen.push(best);
    }
    Ok(chosen)
}

/// `|a & b| / |a | b|`; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `jaccard(s, reference) >= (k - 1) / (k + 1)`, compared exactly.
pub fn within_one_swap(s: &BTreeSet<usize>, reference: &BTreeSet<usize>, k: usize) -> bool {
    let inter = s.intersection(reference).count();
    let union = s.len() + reference.len() - inter;
    if union == 0 {
        return true;
    }
    inter * (k + 1) >= union * k.saturating_sub(1)
}

/// Number of `i` in `s` with `i + 1` also in `s`.
pub fn adjacency_index(s: &BTreeSet<usize>, n_layers: usize) -> Result<usize> {
    if let Some(&bad) = s.iter().find(|&&l| l >= n_layers) {
        return Err(Error::LayerOutOfRange { layer: bad, n_layers });
    }
    Ok(s.iter().filter(|&&i| s.contains(&(i + 1))).count())
}

/// Mean adjacency index of a uniformly random `k`-subset of `n_layers`
/// layers: `k (k - 1) / n_layers`.
pub fn expected_adjacency(k: usize, n_layers: usize) -> Result<f64> {
    check_k(k, n_layers)?;
    if n_layers == 0 {
        return Ok(0.0);
    }
    Ok((k * k.saturating_sub(1)) as f64 / n_layers as f64)
}

/// A selection as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy: String,
    pub k: usize,
    pub n_layers: usize,
    /// In selection order for greedy strategies, ascending otherwise.
    pub layers: Vec<usize>,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    pub adjacency: usize,
    pub expected_adjacency: f64,
}

impl Selection {
    pub fn new(strategy: &str, n_layers: usize, layers: Vec<usize>) -> Result<Self> {
        let set: BTreeSet<usize> = layers.iter().copied().collect();
        if set.len() != layers.len() {
            return Err(invalid("selection repeats a layer"));
        }
        let k = layers.len();
        Ok(Selection {
            strategy: strategy.to_string(),
            k,
            n_layers,
            adjacency: adjacency_index(&set, n_layers)?,
            expected_adjacency: expected_adjacency(k, n_layers)?,
            layers,
            params: serde_json::Map::new(),
        })
    }

    pub fn set(&self) -> BTreeSet<usize> {
        self.layers.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests;
