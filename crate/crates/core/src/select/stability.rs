//! Rolling-window agreement of top-K snapshots and the early-stop rule.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::jaccard;
use crate::error::{invalid, Result};

/// Top-K set observed at optimizer step `step`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSnapshot {
    pub step: usize,
    pub set: BTreeSet<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMode {
    /// Mean pairwise Jaccard, backbone size and union size must all pass.
    Standard,
    /// Fire once the union bound holds and the newest set differs from the
    /// previous one.
    UnionChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub k: usize,
    /// Window length `R`.
    pub window: usize,
    pub jaccard_threshold: f64,
    pub mode: EarlyStopMode,
}

impl StabilityConfig {
    pub fn new(k: usize) -> Self {
        StabilityConfig {
            k,
            window: 10,
            jaccard_threshold: 0.90,
            mode: EarlyStopMode::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityDiagnostics {
    pub step: usize,
    /// `None` until the window is full.
    pub jaccard_mean: Option<f64>,
    pub backbone_size: usize,
    pub union_size: usize,
    /// True only at the snapshot where the rule first fires.
    pub fired: bool,
}

#[derive(Clone, Debug)]
pub struct StabilityState {
    config: StabilityConfig,
    window: VecDeque<BTreeSet<usize>>,
    previous: Option<BTreeSet<usize>>,
    last_step: Option<usize>,
    fired_at: Option<usize>,
}

impl StabilityState {
    pub fn new(config: StabilityConfig) -> Self {
        StabilityState {
            config,
            window: VecDeque::new(),
            previous: None,
            last_step: None,
            fired_at: None,
        }
    }

    pub fn config(&self) -> &StabilityConfig {
        &self.config
    }

    /// Step of the first firing snapshot, if any.
    pub fn fired_at(&self) -> Option<usize> {
        self.fired_at
    }

    pub fn window(&self) -> impl Iterator<Item = &BTreeSet<usize>> {
        self.window.iter()
    }

    /// Intersection of the sets in the window.
    pub fn backbone(&self) -> BTreeSet<usize> {
        let mut it = self.window.iter();
        let Some(first) = it.next() else {
            return BTreeSet::new();
        };
        it.fold(first.clone(), |acc, s| acc.intersection(s).copied().collect())
    }

    pub fn union(&self) -> BTreeSet<usize> {
        self.window.iter().flatten().copied().collect()
    }

    /// Mean Jaccard over all pairs in the window; `None` with fewer than two
    /// snapshots.
    pub fn jaccard_mean(&self) -> Option<f64> {
        let n = self.window.len();
        if n < 2 {
            return None;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += jaccard(&self.window[i], &self.window[j]);
            }
        }
        Some(sum / (n * (n - 1) / 2) as f64)
    }
}

/// Pushes `snapshot` into the window and evaluates the early-stop rule. The
/// rule needs a full window of `R >= 2` snapshots. Once fired, the state
/// keeps its first firing step.
pub fn stability_update(state: &mut StabilityState, snapshot: &SelectionSnapshot) -> Result<StabilityDiagnostics> {
    let c = &state.config;
    if snapshot.set.len() != c.k {
        return Err(invalid(format!(
            "snapshot at step {} holds {} layers, expected {}",
            snapshot.step,
            snapshot.set.len(),
            c.k
        )));
    }
    if state.last_step.is_some_and(|s| snapshot.step <= s) {
        return Err(invalid(format!("snapshot step {} is out of order", snapshot.step)));
    }
    state.last_step = Some(snapshot.step);
    state.window.push_back(snapshot.set.clone());
    while state.window.len() > c.window.max(1) {
        state.window.pop_front();
    }
    let changed = state.previous.as_ref().is_some_and(|p| p != &snapshot.set);
    state.previous = Some(snapshot.set.clone());

    let c = &state.config;
    let ready = c.window >= 2 && state.window.len() == c.window;
    let jaccard_mean = if ready { state.jaccard_mean() } else { None };
    let backbone_size = state.backbone().len();
    let union_size = state.union().len();
    let union_ok = union_size <= c.k + 1;
    let pass = ready
        && match c.mode {
            EarlyStopMode::Standard => {
                jaccard_mean.is_some_and(|j| j >= c.jaccard_threshold)
                    && backbone_size + 1 >= c.k
                    && union_ok
            }
            EarlyStopMode::UnionChange => union_ok && changed,
        };
    let fired = pass && state.fired_at.is_none();
    if fired {
        state.fired_at = Some(snapshot.step);
    }
    Ok(StabilityDiagnostics {
        step: snapshot.step,
        jaccard_mean,
        backbone_size,
        union_size,
        fired,
    })
}

/// Runs a whole stream; returns the trace and the first firing step.
pub fn early_stop_step(config: &StabilityConfig, stream: &[SelectionSnapshot]) -> Result<(Vec<StabilityDiagnostics>, Option<usize>)> {
    let mut state = StabilityState::new(config.clone());
    let trace = stream
        .iter()
        .map(|s| stability_update(&mut state, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((trace, state.fired_at()))
}
