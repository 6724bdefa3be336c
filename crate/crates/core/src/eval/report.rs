use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::error::{Error, Result};

/// Which model produced an accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Fused base, finetuned per task.
    Cold,
    /// Fused base frozen, linear head only.
    Frozen,
    BaselinePretrained,
    BaselinePretrainedFrozen,
    BaselineFuse,
    BaselineFuseFrozen,
    BaselineMultitask,
    BaselineMultitaskFrozen,
    /// Single model finetuned on the union of all contributors' data.
    BaselineCentralized,
    BaselineCentralizedFrozen,
}

impl Regime {
    pub const ALL: [Regime; 10] = [
        Regime::Cold,
        Regime::Frozen,
        Regime::BaselinePretrained,
        Regime::BaselinePretrainedFrozen,
        Regime::BaselineFuse,
        Regime::BaselineFuseFrozen,
        Regime::BaselineMultitask,
        Regime::BaselineMultitaskFrozen,
        Regime::BaselineCentralized,
        Regime::BaselineCentralizedFrozen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Cold => "cold",
            Regime::Frozen => "frozen",
            Regime::BaselinePretrained => "baseline_pretrained",
            Regime::BaselinePretrainedFrozen => "baseline_pretrained_frozen",
            Regime::BaselineFuse => "baseline_fuse",
            Regime::BaselineFuseFrozen => "baseline_fuse_frozen",
            Regime::BaselineMultitask => "baseline_multitask",
            Regime::BaselineMultitaskFrozen => "baseline_multitask_frozen",
            Regime::BaselineCentralized => "baseline_centralized",
            Regime::BaselineCentralizedFrozen => "baseline_centralized_frozen",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Codec(format!("unknown regime {s:?}")))
    }
}

/// One accuracy measurement. `scenario` carries the arm label, e.g. `fixed_total/c=4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub scenario: String,
    pub seed: u64,
    pub iteration: u64,
    pub task_id: String,
    pub regime: Regime,
    pub accuracy: f64,
}

/// Aggregate of one `(scenario, regime, iteration)` cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub regime: Regime,
    pub iteration: u64,
    /// Mean over tasks for each seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
    /// Standard error of the mean across seeds.
    pub sem_seeds: f64,
    /// Standard error across tasks of the seed-averaged per-task accuracy.
    pub sem_tasks: f64,
    pub n_tasks: usize,
}

pub const CSV_HEADER: &str = "scenario,seed,iteration,task_id,regime,accuracy";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates rows per `(scenario, regime, iteration)`; seeds follow `seeds` order.
pub fn summarize(rows: &[AccuracyRow], seeds: &[u64]) -> Vec<SummaryRow> {
    type Cell = BTreeMap<u64, BTreeMap<String, f64>>;
    let mut cells: BTreeMap<(String, Regime, u64), Cell> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.scenario.clone(), r.regime, r.iteration))
            .or_default()
            .entry(r.seed)
            .or_default()
            .insert(r.task_id.clone(), r.accuracy);
    }
    cells
        .into_iter()
        .map(|((scenario, regime, iteration), by_seed)| {
            let per_seed: Vec<f64> = seeds
                .iter()
                .filter_map(|s| by_seed.get(s))
                .map(|tasks| tasks.values().sum::<f64>() / tasks.len() as f64)
                .collect();
            let (mean, std) = mean_std(&per_seed);
            let mut by_task: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for tasks in by_seed.values() {
                for (t, a) in tasks {
                    by_task.entry(t).or_default().push(*a);
                }
            }
            let task_means: Vec<f64> = by_task
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let (_, task_std) = mean_std(&task_means);
            SummaryRow {
                sem_seeds: std / (per_seed.len().max(1) as f64).sqrt(),
                sem_tasks: task_std / (task_means.len().max(1) as f64).sqrt(),
                n_tasks: task_means.len(),
                scenario,
                regime,
                iteration,
                per_seed,
                mean,
                std,
            }
        })
        .collect()
}

/// Everything one scenario run measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub rows: Vec<AccuracyRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    /// Sorts rows into canonical order and computes the summary.
    pub fn new(scenario: Scenario, seeds: Vec<u64>, mut rows: Vec<AccuracyRow>) -> Self {
        rows.sort_by(|a, b| {
            (&a.scenario, a.seed, a.iteration, a.regime, &a.task_id)
                .cmp(&(&b.scenario, b.seed, b.iteration, b.regime, &b.task_id))
        });
        let summary = summarize(&rows, &seeds);
        Self {
            scenario,
            seeds,
            rows,
            summary,
        }
    }

    /// Mean across seeds of the task-averaged accuracy for one cell.
    pub fn mean(&self, scenario: &str, regime: Regime, iteration: u64) -> Option<f64> {
        self.cell(scenario, regime, iteration).map(|s| s.mean)
    }

    pub fn cell(&self, scenario: &str, regime: Regime, iteration: u64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.scenario == scenario && s.regime == regime && s.iteration == iteration)
    }

    /// Seed-mean curve of one regime, ordered by iteration.
    pub fn curve(&self, scenario: &str, regime: Regime) -> Vec<(u64, f64)> {
        self.summary
            .iter()
            .filter(|s| s.scenario == scenario && s.regime == regime)
            .map(|s| (s.iteration, s.mean))
            .collect()
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.rows.iter().map(|r| r.scenario.clone()).collect();
        labels.dedup();
        labels
    }

    pub fn final_iteration(&self, scenario: &str) -> Option<u64> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario)
            .map(|r| r.iteration)
            .max()
    }

    /// Accuracies in range and summary equal to a fresh recomputation.
    pub fn check_consistency(&self) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| !(0.0..=1.0).contains(&r.accuracy)) {
            return Err(Error::Codec(format!("accuracy {} out of range", r.accuracy)));
        }
        let fresh = summarize(&self.rows, &self.seeds);
        if fresh.len() != self.summary.len() {
            return Err(Error::Codec("summary cell count mismatch".into()));
        }
        for (a, b) in fresh.iter().zip(&self.summary) {
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 || (x.is_nan() && y.is_nan());
            let same_key = a.scenario == b.scenario && a.regime == b.regime && a.iteration == b.iteration;
            if !same_key
                || !close(a.mean, b.mean)
                || !close(a.std, b.std)
                || a.per_seed.len() != b.per_seed.len()
                || a.per_seed.iter().zip(&b.per_seed).any(|(x, y)| !close(*x, *y))
            {
                return Err(Error::Codec(format!(
                    "summary for {}/{}/{} does not match its rows",
                    b.scenario, b.regime, b.iteration
                )));
            }
        }
        Ok(())
    }

    /// Long-format CSV: `scenario,seed,iteration,task_id,regime,accuracy`.
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Codec(format!("report json: {e}")))
    }
}

pub fn rows_to_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scenario, r.seed, r.iteration, r.task_id, r.regime, r.accuracy
        ));
    }
    out
}

/// Parses the long-format CSV written by [`EvalReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<AccuracyRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Codec("missing or unexpected CSV header".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |m: &str| Error::Codec(format!("line {}: {m}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let accuracy: f64 = f[5].parse().map_err(|_| bad("bad accuracy"))?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(bad("accuracy out of range"));
            }
            Ok(AccuracyRow {
                scenario: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("bad seed"))?,
                iteration: f[2].parse().map_err(|_| bad("bad iteration"))?,
                task_id: f[3].to_string(),
                regime: f[4].parse().map_err(|_| bad("bad regime"))?,
                accuracy,
            })
        })
        .collect()
}
