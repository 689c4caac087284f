//! Metrics rows and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cal::{CalHistory, CalRecord};
use crate::error::{Error, Result};
use crate::kaa::KaaHistory;
use crate::objectives::AccuracyReport;

pub const METRICS_VERSION: u32 = 1;
pub const COLUMNS: &str = "phase,cycle_or_iter,task,split,accuracy,loss,lr,alpha,beta,labeled_count,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Kaa,
    Cal,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Kaa => "kaa",
            Phase::Cal => "cal",
            Phase::Eval => "eval",
        }
    }
}

/// One metrics line. `task` is 1-based; task 0 is the mean over tasks.
/// Absent values are written as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: Phase,
    pub cycle_or_iter: u64,
    pub task: usize,
    pub split: String,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub labeled_count: Option<usize>,
    pub seed: u64,
}

impl MetricsRow {
    fn key(&self) -> (Phase, u64, usize, &str) {
        (self.phase, self.cycle_or_iter, self.task, &self.split)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One validation row per (cycle, task) for the consolidated model, plus
/// the task mean. Loss, learning rate and β come from that task's
/// learning iteration in the cycle.
pub fn kaa_rows(history: &KaaHistory, seed: u64) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for c in &history.cycles {
        for (m, &acc) in c.val_foundation.iter().enumerate() {
            let it = history.iterations.iter().find(|r| r.t == c.t && r.m == m + 1);
            rows.push(MetricsRow {
                phase: Phase::Kaa,
                cycle_or_iter: c.t,
                task: m + 1,
                split: "val".into(),
                accuracy: Some(acc),
                loss: it.map(|r| r.loss_total),
                lr: it.map(|r| r.lr),
                alpha: Some(c.alpha),
                beta: it.map(|r| r.beta),
                labeled_count: None,
                seed,
            });
        }
        let its: Vec<_> = history.iterations.iter().filter(|r| r.t == c.t).collect();
        rows.push(MetricsRow {
            phase: Phase::Kaa,
            cycle_or_iter: c.t,
            task: 0,
            split: "val".into(),
            accuracy: mean(&c.val_foundation),
            loss: mean(&its.iter().map(|r| r.loss_total).collect::<Vec<_>>()),
            lr: its.last().map(|r| r.lr),
            alpha: Some(c.alpha),
            beta: None,
            labeled_count: None,
            seed,
        });
    }
    rows
}

/// Test-set rows per CAL iteration, including the pre-adaptation point 0.
pub fn cal_rows(history: &CalHistory, seed: u64) -> Vec<MetricsRow> {
    history.records.iter().flat_map(|r| cal_record_rows(r, seed)).collect()
}

pub fn cal_record_rows(r: &CalRecord, seed: u64) -> Vec<MetricsRow> {
    let ft = r.finetune.as_ref();
    let row = |task: usize, accuracy: Option<f64>| MetricsRow {
        phase: Phase::Cal,
        cycle_or_iter: r.iteration as u64,
        task,
        split: "test".into(),
        accuracy,
        loss: ft.map(|f| f.loss),
        lr: ft.map(|f| f.lr),
        alpha: None,
        beta: None,
        labeled_count: Some(r.labeled_count),
        seed,
    };
    let mut rows: Vec<MetricsRow> = r.test.per_task.iter().enumerate().map(|(m, a)| row(m + 1, *a)).collect();
    rows.push(row(0, r.test.average));
    rows
}

/// Rows for a standalone evaluation on `split`.
pub fn eval_rows(report: &AccuracyReport, split: &str, seed: u64) -> Vec<MetricsRow> {
    let row = |task: usize, accuracy: Option<f64>| MetricsRow {
        phase: Phase::Eval,
        cycle_or_iter: 0,
        task,
        split: split.into(),
        accuracy,
        loss: None,
        lr: None,
        alpha: None,
        beta: None,
        labeled_count: None,
        seed,
    };
    let mut rows: Vec<MetricsRow> = report.per_task.iter().enumerate().map(|(m, a)| row(m + 1, *a)).collect();
    rows.push(row(0, report.average));
    rows
}

fn cell_f(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v:.6}");
    }
}

/// CSV text: a version line, the column line, then rows sorted by
/// (phase, index, task, split).
pub fn to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.key().cmp(&b.key()));
    if let Some(w) = sorted.windows(2).find(|w| w[0].key() == w[1].key()) {
        return Err(Error::Contract(format!("duplicate metrics row {:?}", w[0].key())));
    }
    let mut out = format!("# kaa-cal metrics v{METRICS_VERSION}\n{COLUMNS}\n");
    for r in sorted {
        if r.split.contains([',', '\n', '"']) {
            return Err(Error::Format(format!("split name {:?} cannot be written to csv", r.split)));
        }
        let _ = write!(out, "{},{},{},{}", r.phase.name(), r.cycle_or_iter, r.task, r.split);
        cell_f(&mut out, r.accuracy);
        cell_f(&mut out, r.loss);
        cell_f(&mut out, r.lr);
        cell_f(&mut out, r.alpha);
        cell_f(&mut out, r.beta);
        out.push(',');
        if let Some(n) = r.labeled_count {
            let _ = write!(out, "{n}");
        }
        let _ = writeln!(out, ",{}", r.seed);
    }
    Ok(out)
}

pub fn export_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        log::warn!("no metrics to export; writing header only to {}", path.display());
    }
    let csv = to_csv(rows)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kaa::{CycleRecord, IterationRecord};

    fn kaa_history() -> KaaHistory {
        let mut h = KaaHistory::default();
        for t in 1..=3u64 {
            for m in 1..=2usize {
                h.iterations.push(IterationRecord {
                    i: (t - 1) * 2 + m as u64,
                    t,
                    m,
                    beta: 0.5 + 0.1 * m as f64,
                    p_hat: 0.5,
                    observed: 0.6,
                    lr: 1e-4 / t as f64,
                    loss_cls: 1.0,
                    loss_cst: 0.5,
                    loss_total: 0.75,
                    steps: 4,
                });
            }
            h.cycles.push(CycleRecord {
                t,
                alpha: crate::kaa::stability_alpha(t, 3).unwrap(),
                val_foundation: vec![0.5 + 0.1 * t as f64, 0.25],
                val_student: vec![0.9, 0.9],
            });
        }
        h
    }

    #[test]
    fn empty_history_is_header_only() {
        let csv = to_csv(&[]).unwrap();
        assert_eq!(csv, format!("# kaa-cal metrics v1\n{COLUMNS}\n"));
    }

    #[test]
    fn rows_sorted_with_fixed_decimals() {
        let mut rows = kaa_rows(&kaa_history(), 7);
        rows.reverse();
        let csv = to_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2 + 9);
        assert_eq!(lines[2], "kaa,1,0,val,0.425000,0.750000,0.000100,0.925000,,,7");
        assert_eq!(lines[3], "kaa,1,1,val,0.600000,0.750000,0.000100,0.925000,0.600000,,7");
        assert!(lines[10].starts_with("kaa,3,2,val,0.250000"));
    }

    #[test]
    fn alpha_column_nondecreasing() {
        let rows = kaa_rows(&kaa_history(), 0);
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.key().cmp(&b.key()));
        let alphas: Vec<f64> = sorted.iter().map(|r| r.alpha.unwrap()).collect();
        assert!(alphas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn identical_rows_identical_bytes() {
        let a = to_csv(&kaa_rows(&kaa_history(), 1)).unwrap();
        let b = to_csv(&kaa_rows(&kaa_history(), 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_key_rejected() {
        let rows = kaa_rows(&kaa_history(), 1);
        let mut dup = rows.clone();
        dup.push(rows[0].clone());
        assert_eq!(to_csv(&dup).unwrap_err().kind(), "contract");
    }

    #[test]
    fn eval_rows_include_mean() {
        let report = AccuracyReport {
            per_task: vec![Some(1.0), None],
            counts: vec![2, 0],
            average: Some(1.0),
        };
        let csv = to_csv(&eval_rows(&report, "test", 3)).unwrap();
        assert!(csv.contains("eval,0,2,test,,,,,,,3\n"));
    }
}
