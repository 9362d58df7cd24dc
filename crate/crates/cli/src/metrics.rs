//! Per-round metrics as CSV.
//!
//! Columns, in order: `round, policy, seed, train_loss, test_loss, test_acc,
//! eta, n_labeled, n_excluded, selected_ids, labeled_ids, excluded_ids,
//! divergence, p_0 .. p_{K-1}`. Id lists are `;`-joined; `divergence` is
//! empty when the diagnostic is off; `p_i` is the selection probability
//! after the round's update.

use std::io::Write;
use std::path::Path;

use fedsim_core::orchestrator::RoundRecord;
use fedsim_core::NodeId;

use crate::error::{CliError, CliResult};

const FIXED_COLUMNS: [&str; 13] = [
    "round",
    "policy",
    "seed",
    "train_loss",
    "test_loss",
    "test_acc",
    "eta",
    "n_labeled",
    "n_excluded",
    "selected_ids",
    "labeled_ids",
    "excluded_ids",
    "divergence",
];

/// Columns that [`MetricsTable::column`] can plot.
pub const NUMERIC_COLUMNS: [&str; 7] = [
    "train_loss",
    "test_loss",
    "test_acc",
    "eta",
    "n_labeled",
    "n_excluded",
    "divergence",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub policy: String,
    pub seed: u64,
    pub num_nodes: usize,
    pub rows: Vec<RoundRecord>,
}

pub fn header(num_nodes: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..num_nodes).map(|i| format!("p_{i}")))
        .collect()
}

fn join_ids(ids: &[NodeId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

impl MetricsTable {
    pub fn new(policy: impl Into<String>, seed: u64, num_nodes: usize, rows: Vec<RoundRecord>) -> Self {
        MetricsTable {
            policy: policy.into(),
            seed,
            num_nodes,
            rows,
        }
    }

    /// Values of a numeric column, one per round; `None` for unknown names.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let get: fn(&RoundRecord) -> f64 = match name {
            "train_loss" => |r| r.train_loss,
            "test_loss" => |r| r.test_loss,
            "test_acc" => |r| r.test_accuracy,
            "eta" => |r| r.learning_rate,
            "n_labeled" => |r| r.labeled.len() as f64,
            "n_excluded" => |r| r.excluded.len() as f64,
            "divergence" => |r| r.divergence.unwrap_or(f64::NAN),
            _ => return None,
        };
        Some(self.rows.iter().map(get).collect())
    }

    /// Mean test accuracy over the last `window` rounds.
    pub fn final_accuracy(&self, window: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(window)..];
        tail.iter().map(|r| r.test_accuracy).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header(self.num_nodes))?;
        for r in &self.rows {
            let mut rec = vec![
                r.round.to_string(),
                self.policy.clone(),
                self.seed.to_string(),
                r.train_loss.to_string(),
                r.test_loss.to_string(),
                r.test_accuracy.to_string(),
                r.learning_rate.to_string(),
                r.labeled.len().to_string(),
                r.excluded.len().to_string(),
                join_ids(&r.selected),
                join_ids(&r.labeled),
                join_ids(&r.excluded),
                r.divergence.map(|d| d.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.probabilities.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| CliError::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> CliResult<()> {
        let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}
