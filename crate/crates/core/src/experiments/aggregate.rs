use serde::{Deserialize, Serialize};

use super::{Cell, Metric, SweepRecord};
use crate::stats;

/// Statistics over the finite values of one metric in one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation over `√n`.
    pub stderr: f64,
    pub median: f64,
    pub n: usize,
    /// Values dropped because they were NaN or infinite.
    pub excluded: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    Summary {
        mean: stats::mean(&finite),
        stderr: stats::stderr(&finite),
        median: stats::median(&finite),
        n: finite.len(),
        excluded: values.len() - finite.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub records: usize,
    pub failed: usize,
    pub metrics: Vec<(Metric, Summary)>,
}

impl CellSummary {
    pub fn get(&self, metric: Metric) -> Summary {
        self.metrics.iter().find(|(m, _)| *m == metric).map(|(_, s)| *s).expect("every metric is summarized")
    }
}

/// Per-cell summaries, ordered by cell index.
pub fn aggregate(records: &[SweepRecord]) -> Vec<CellSummary> {
    let mut by_cell: Vec<(Cell, Vec<&SweepRecord>)> = Vec::new();
    for r in records {
        match by_cell.iter_mut().find(|(c, _)| c.index == r.cell.index) {
            Some((_, v)) => v.push(r),
            None => by_cell.push((r.cell, vec![r])),
        }
    }
    by_cell.sort_by_key(|(c, _)| c.index);
    by_cell
        .into_iter()
        .map(|(cell, rs)| {
            let ok: Vec<&SweepRecord> = rs.iter().copied().filter(|r| r.ok()).collect();
            let metrics = Metric::ALL
                .iter()
                .map(|m| (*m, summarize(&ok.iter().map(|r| m.of(r)).collect::<Vec<_>>())))
                .collect();
            CellSummary { cell, records: rs.len(), failed: rs.len() - ok.len(), metrics }
        })
        .collect()
}
