//! Metric trajectories across checkpoints and their cross-task
//! correlations. Correlations always use the raw trajectories; smoothing is
//! only offered for display.

mod stats;

pub use stats::{average_ranks, ema_smooth, pearson, spearman};

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{run_benchmark, EvalReport, EvalSet, ModelScorer};
use crate::model::{load_checkpoint, VlmModel};
use crate::objectives::{LossBundle, TrainingRun};
use crate::synthdata::BatchKind;

pub const DEFAULT_EMA_FACTOR: f64 = 0.6;

/// One row per evaluated checkpoint, one column per `task.metric`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTable {
    pub columns: Vec<String>,
    pub steps: Vec<usize>,
    /// `values[row][column]`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl TrajectoryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push_report(&mut self, report: &EvalReport) -> Result<()> {
        let values: Vec<(String, f64)> = report.metrics.iter().map(|m| (m.key(), m.value)).collect();
        self.push_row(report.step, &values)
    }

    pub fn push_row(&mut self, step: usize, values: &[(String, f64)]) -> Result<()> {
        if self.steps.last().is_some_and(|&last| step <= last) {
            return Err(Error::Configuration(format!(
                "trajectory steps must increase: {step} after {}",
                self.steps[self.steps.len() - 1]
            )));
        }
        for (k, _) in values {
            if !self.columns.contains(k) {
                self.columns.push(k.clone());
                for row in &mut self.values {
                    row.push(None);
                }
            }
        }
        let mut row = vec![None; self.columns.len()];
        for (k, v) in values {
            let c = self.columns.iter().position(|x| x == k).expect("column added above");
            row[c] = Some(*v);
        }
        self.steps.push(step);
        self.values.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self
            .columns
            .iter()
            .position(|x| x == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        Ok(self.values.iter().map(|r| r[c]).collect())
    }

    /// Display copy with each column smoothed over its present values.
    pub fn smoothed(&self, alpha: f64) -> Result<TrajectoryTable> {
        let mut out = self.clone();
        for c in 0..self.columns.len() {
            let rows: Vec<usize> = (0..self.len()).filter(|&r| self.values[r][c].is_some()).collect();
            if rows.is_empty() {
                continue;
            }
            let series: Vec<f64> = rows.iter().map(|&r| self.values[r][c].unwrap()).collect();
            for (&r, v) in rows.iter().zip(ema_smooth(&series, alpha)?) {
                out.values[r][c] = Some(v);
            }
        }
        Ok(out)
    }

    pub fn to_tsv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nstep");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (step, row) in self.steps.iter().zip(&self.values) {
            write!(out, "{step}").ok();
            for v in row {
                match v {
                    Some(v) => write!(out, "\t{v}").ok(),
                    None => write!(out, "\tNA").ok(),
                };
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<TrajectoryTable> {
        let bad = |m: String| Error::parse("trajectory", m);
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("step") {
            return Err(bad(format!("header must start with step: {header:?}")));
        }
        let mut table = TrajectoryTable {
            columns: cols.map(str::to_string).collect(),
            ..Self::default()
        };
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != table.columns.len() + 1 {
                return Err(bad(format!("wrong field count in {line:?}")));
            }
            let step: usize = f[0].parse().map_err(|e| bad(format!("step: {e}")))?;
            if table.steps.last().is_some_and(|&s| step <= s) {
                return Err(bad(format!("step {step} is not increasing")));
            }
            let row = f[1..]
                .iter()
                .map(|v| match *v {
                    "NA" => Ok(None),
                    v => v.parse().map(Some).map_err(|e| bad(format!("value {v:?}: {e}"))),
                })
                .collect::<Result<_>>()?;
            table.steps.push(step);
            table.values.push(row);
        }
        Ok(table)
    }
}

/// Correlation of two trajectory columns; coefficients are `None` when
/// undefined (zero variance), with the reason in `note`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub metric_a: String,
    pub metric_b: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n: usize,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub records: Vec<CorrelationRecord>,
}

impl CorrelationReport {
    pub fn get(&self, a: &str, b: &str) -> Option<&CorrelationRecord> {
        self.records.iter().find(|r| r.metric_a == a && r.metric_b == b)
    }

    pub fn to_tsv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nmetric_a\tmetric_b\tpearson\tspearman\tn\n");
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        for r in &self.records {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", r.metric_a, r.metric_b, fmt(r.pearson), fmt(r.spearman), r.n).ok();
        }
        out
    }
}

/// Every unordered pair of distinct columns, in column order.
pub fn all_pairs(table: &TrajectoryTable) -> Vec<(String, String)> {
    let c = &table.columns;
    (0..c.len())
        .flat_map(|i| (i + 1..c.len()).map(move |j| (c[i].clone(), c[j].clone())))
        .collect()
}

/// Pearson and Spearman coefficients on raw values at the steps where both
/// columns are present. Missing columns and fewer than three shared steps
/// are errors; zero-variance pairs become sentinel records.
pub fn correlate_tasks(table: &TrajectoryTable, pairs: &[(String, String)]) -> Result<CorrelationReport> {
    let mut report = CorrelationReport::default();
    for (a, b) in pairs {
        let (ca, cb) = (table.column(a)?, table.column(b)?);
        let (x, y): (Vec<f64>, Vec<f64>) = ca
            .iter()
            .zip(&cb)
            .filter_map(|(u, v)| Some(((*u)?, (*v)?)))
            .unzip();
        if x.len() < 3 {
            return Err(Error::InsufficientOverlap {
                a: a.clone(),
                b: b.clone(),
                n: x.len(),
            });
        }
        let record = match (pearson(&x, &y), spearman(&x, &y)) {
            (Ok(p), Ok(s)) => CorrelationRecord {
                metric_a: a.clone(),
                metric_b: b.clone(),
                pearson: Some(p),
                spearman: Some(s),
                n: x.len(),
                note: None,
            },
            (Err(Error::UndefinedCorrelation(why)), _) | (_, Err(Error::UndefinedCorrelation(why))) => {
                CorrelationRecord {
                    metric_a: a.clone(),
                    metric_b: b.clone(),
                    pearson: None,
                    spearman: None,
                    n: x.len(),
                    note: Some(why),
                }
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        report.records.push(record);
    }
    Ok(report)
}

/// Checkpoint steps for a run of `total` steps evaluated every `cadence`.
pub fn cadence_steps(total: usize, cadence: usize) -> Result<Vec<usize>> {
    if cadence == 0 || !total.is_multiple_of(cadence) {
        return Err(Error::Configuration(format!(
            "cadence {cadence} does not divide {total} steps"
        )));
    }
    Ok((1..=total / cadence).map(|i| i * cadence).collect())
}

pub enum TrackEvent<'a> {
    Step {
        step: usize,
        kind: BatchKind,
        losses: &'a LossBundle,
    },
    Checkpoint {
        /// Completed steps.
        step: usize,
        model: &'a VlmModel,
        report: &'a EvalReport,
    },
}

/// Trains `run` to completion, evaluating a snapshot every `cadence` steps.
pub fn track(
    run: &mut TrainingRun,
    set: &EvalSet,
    cadence: usize,
    config_hash: &str,
    hook: &mut dyn FnMut(TrackEvent<'_>) -> Result<()>,
) -> Result<TrajectoryTable> {
    let marks = cadence_steps(run.settings.steps, cadence)?;
    let mut table = TrajectoryTable::new();
    while !run.is_done() {
        let (step, kind, losses) = run.advance()?;
        hook(TrackEvent::Step {
            step,
            kind,
            losses: &losses,
        })?;
        let done = run.step();
        if marks.contains(&done) {
            let (report, _) = run_benchmark(&ModelScorer(&run.model), set, done, config_hash)?;
            table.push_report(&report)?;
            hook(TrackEvent::Checkpoint {
                step: done,
                model: &run.model,
                report: &report,
            })?;
        }
    }
    Ok(table)
}

/// Rebuilds a trajectory by evaluating saved checkpoints in step order.
/// Every checkpoint must carry `config_hash`.
pub fn trajectory_from_checkpoints(paths: &[PathBuf], set: &EvalSet, config_hash: &str) -> Result<TrajectoryTable> {
    if paths.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    let mut reports = Vec::new();
    for path in paths {
        let ck = load_checkpoint(path)?;
        if ck.config_hash != config_hash {
            return Err(Error::HashMismatch {
                path: path.clone(),
                expected: config_hash.to_string(),
                found: ck.config_hash,
            });
        }
        let model = VlmModel::from_checkpoint(&ck)?;
        reports.push(run_benchmark(&ModelScorer(&model), set, ck.step, config_hash)?.0);
    }
    reports.sort_by_key(|r| r.step);
    let mut table = TrajectoryTable::new();
    for r in &reports {
        table.push_report(r)?;
    }
    Ok(table)
}
