//! CSV outputs. Header names are fixed; list-valued cells are `;`-joined
//! and missing values are empty.

use std::fs;
use std::path::Path;

use serde::Serialize;

use sfada_core::adapt::{RoundRecord, RoundScores};
use sfada_core::train::EvalMetrics;

use crate::error::{Error, Result};

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn per_class(m: &EvalMetrics) -> String {
    join(m.per_class.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()))
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct RoundRow {
    round: usize,
    cumulative_budget: usize,
    num_selected: usize,
    selected_indices: String,
    mean_l_tr: f64,
    mean_l_task: f64,
    mean_total: f64,
    steps: usize,
    accuracy: f64,
    per_class_accuracy: String,
}

/// One row per adaptation round.
pub fn write_rounds_csv(path: &Path, rounds: &[RoundRecord]) -> Result<()> {
    write_rows(
        path,
        rounds.iter().map(|r| RoundRow {
            round: r.round,
            cumulative_budget: r.cumulative_budget,
            num_selected: r.selected_indices.len(),
            selected_indices: join(&r.selected_indices),
            mean_l_tr: r.mean_l_tr,
            mean_l_task: r.mean_l_task,
            mean_total: r.mean_total,
            steps: r.steps,
            accuracy: r.eval.accuracy,
            per_class_accuracy: per_class(&r.eval),
        }),
    )
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    round: usize,
    index: usize,
    a_g: Option<f64>,
    a_e: Option<f64>,
    a_d: Option<f64>,
    h_al: f64,
    selected: u8,
}

/// Per-sample acquisition scores of every round.
pub fn write_scores_csv(path: &Path, rounds: &[RoundScores]) -> Result<()> {
    let rows = rounds.iter().flat_map(|r| {
        r.scores.iter().map(move |s| ScoreRow {
            round: r.round,
            index: s.index,
            a_g: s.a_g,
            a_e: s.a_e,
            a_d: s.a_d,
            h_al: s.h_al,
            selected: u8::from(r.selected.contains(&s.index)),
        })
    });
    write_rows(path, rows)
}

#[derive(Debug, Serialize)]
struct EvalRow {
    class: String,
    count: usize,
    correct: usize,
    accuracy: Option<f64>,
}

/// One row per class plus a final `all` row.
pub fn write_eval_csv(path: &Path, metrics: &EvalMetrics) -> Result<()> {
    let mut rows: Vec<EvalRow> = (0..metrics.class_counts.len())
        .map(|k| EvalRow {
            class: k.to_string(),
            count: metrics.class_counts[k],
            correct: metrics.class_correct[k],
            accuracy: metrics.per_class[k],
        })
        .collect();
    rows.push(EvalRow {
        class: "all".into(),
        count: metrics.class_counts.iter().sum(),
        correct: metrics.class_correct.iter().sum(),
        accuracy: Some(metrics.accuracy),
    });
    write_rows(path, rows)
}

/// One grid cell run for one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub sampler: String,
    pub gatn_mode: String,
    pub pseudo_labels: bool,
    pub budget: usize,
    pub seed: u64,
    pub status: String,
    pub accuracy: Option<f64>,
    pub per_class_accuracy: String,
    pub error: String,
}

impl ResultRow {
    pub fn set_metrics(&mut self, m: &EvalMetrics) {
        self.status = "ok".into();
        self.accuracy = Some(m.accuracy);
        self.per_class_accuracy = per_class(m);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub sampler: String,
    pub gatn_mode: String,
    pub pseudo_labels: bool,
    pub budget: usize,
    pub seeds: usize,
    pub failures: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub budget: usize,
    pub full_mean: f64,
    pub transferability_only_mean: f64,
    pub delta: f64,
}

/// Rows of an ablation grid with per-cell aggregation over seeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

impl ResultsTable {
    /// One row per experiment id, in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        for row in &self.rows {
            if out.iter().any(|s| s.experiment_id == row.experiment_id) {
                continue;
            }
            let cell: Vec<&ResultRow> = self.rows.iter().filter(|r| r.experiment_id == row.experiment_id).collect();
            let accs: Vec<f64> = cell.iter().filter_map(|r| r.accuracy).collect();
            let stats = mean_std(&accs);
            out.push(SummaryRow {
                experiment_id: row.experiment_id.clone(),
                sampler: row.sampler.clone(),
                gatn_mode: row.gatn_mode.clone(),
                pseudo_labels: row.pseudo_labels,
                budget: row.budget,
                seeds: cell.len(),
                failures: cell.len() - accs.len(),
                mean_accuracy: stats.map(|s| s.0),
                std_accuracy: stats.map(|s| s.1),
            });
        }
        out
    }

    /// Difference between the full method (hal sampler, full transfer loss,
    /// pseudo-labels) and transferability-only sampling without transfer loss,
    /// per budget where both cells have results.
    pub fn deltas(&self) -> Vec<DeltaRow> {
        let summary = self.summary();
        let find = |budget: usize, sampler: &str, mode: &str, pseudo: Option<bool>| {
            summary
                .iter()
                .filter(|s| s.budget == budget && s.sampler == sampler && s.gatn_mode == mode)
                .filter(|s| pseudo.is_none_or(|p| s.pseudo_labels == p))
                .find_map(|s| s.mean_accuracy)
        };
        let mut budgets: Vec<usize> = summary.iter().map(|s| s.budget).collect();
        budgets.sort_unstable();
        budgets.dedup();
        budgets
            .into_iter()
            .filter_map(|b| {
                let full = find(b, "hal", "full", Some(true))?;
                let base = find(b, "transferability_only", "off", None)?;
                Some(DeltaRow { budget: b, full_mean: full, transferability_only_mean: base, delta: full - base })
            })
            .collect()
    }

    pub fn write(&self, rows_path: &Path, summary_path: &Path, delta_path: &Path) -> Result<()> {
        write_rows(rows_path, &self.rows)?;
        write_rows(summary_path, self.summary())?;
        write_rows(delta_path, self.deltas())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[3.0]), Some((3.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
