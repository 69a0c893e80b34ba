//! Loss curves and run summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::StageConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Tokens consumed once this step finished.
    pub tokens: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub label: String,
    pub config: StageConfig,
    pub tokens_consumed: u64,
    pub curve: Vec<LossPoint>,
}

impl StageReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|p| p.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|p| p.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.curve[self.curve.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64)
    }

    /// `step,tokens,loss` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.curve {
            out.serialize(p).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
