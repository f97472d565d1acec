use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One test evaluation, with the training-batch terms of the step that
/// preceded it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub recon: f64,
    pub kl_node: f64,
    pub kl_edge: f64,
    pub kl_global: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub evals: Vec<EvalPoint>,
    /// Step of the best evaluation; its parameters are the returned ones.
    pub best_step: Option<usize>,
    pub best_value: Option<f64>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub diverged_at: Option<usize>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Equality of everything except the wall-clock time.
impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.evals == other.evals
            && self.best_step == other.best_step
            && self.best_value == other.best_value
            && self.steps_run == other.steps_run
            && self.stopped_early == other.stopped_early
            && self.diverged_at == other.diverged_at
    }
}

impl RunRecord {
    /// One JSON line per evaluation.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.evals {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

/// A results-table cell: one model under one evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub size: String,
    pub setting: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
