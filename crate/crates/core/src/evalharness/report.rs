//! Report and score-dump files.
//!
//! Report TSV:
//!
//! ```text
//! # config_hash=<hex>
//! # step=<n>
//! task  metric  value  count
//! ```
//!
//! Score dump TSV: `item_id  subtask  role  score  label`, label `1`/`0`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Subtask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

impl Metric {
    /// `task.metric`, the column name used in trajectories.
    pub fn key(&self) -> String {
        format!("{}.{}", self.task, self.metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub config_hash: String,
    pub metrics: Vec<Metric>,
}

impl EvalReport {
    pub fn push(&mut self, task: &str, metric: &str, value: f64, count: usize) {
        self.metrics.push(Metric {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            count,
        });
    }

    fn find(&self, task: &str, metric: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.task == task && m.metric == metric)
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.find(task, metric).map(|m| m.value)
    }

    pub fn count(&self, task: &str, metric: &str) -> Option<usize> {
        self.find(task, metric).map(|m| m.count)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("report", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("report", e.to_string()))
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.tsv")), render_report_tsv(self))?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()? + "\n")?;
        Ok(())
    }
}

pub fn render_report_tsv(r: &EvalReport) -> String {
    let mut out = format!("# config_hash={}\n# step={}\ntask\tmetric\tvalue\tcount\n", r.config_hash, r.step);
    for m in &r.metrics {
        writeln!(out, "{}\t{}\t{}\t{}", m.task, m.metric, m.value, m.count).ok();
    }
    out
}

pub fn parse_report_tsv(text: &str) -> Result<EvalReport> {
    let bad = |m: String| Error::parse("report", m);
    let mut report = EvalReport {
        step: 0,
        config_hash: String::new(),
        metrics: Vec::new(),
    };
    let mut header = false;
    for line in text.lines().filter(|l| !l.is_empty()) {
        if let Some(c) = line.strip_prefix("# ") {
            if let Some(h) = c.strip_prefix("config_hash=") {
                report.config_hash = h.to_string();
            } else if let Some(s) = c.strip_prefix("step=") {
                report.step = s.parse().map_err(|e| bad(format!("step: {e}")))?;
            }
            continue;
        }
        if !header {
            if line != "task\tmetric\tvalue\tcount" {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [task, metric, value, count] = f.as_slice() else {
            return Err(bad(format!("expected 4 fields in {line:?}")));
        };
        report.push(
            task,
            metric,
            value.parse().map_err(|e| bad(format!("value: {e}")))?,
            count.parse().map_err(|e| bad(format!("count: {e}")))?,
        );
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub item_id: String,
    pub subtask: Subtask,
    pub role: String,
    pub score: f64,
    pub label: bool,
}

pub fn write_score_dump(path: &Path, config_hash: &str, records: &[ScoreRecord]) -> Result<()> {
    let mut out = format!("# config_hash={config_hash}\nitem_id\tsubtask\trole\tscore\tlabel\n");
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.item_id, r.subtask, r.role, r.score, r.label as u8).ok();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_score_dump(path: &Path) -> Result<Vec<ScoreRecord>> {
    let bad = |m: String| Error::parse("score dump", m);
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let [id, subtask, role, score, label] = f.as_slice() else {
                return Err(bad(format!("expected 5 fields in {line:?}")));
            };
            Ok(ScoreRecord {
                item_id: id.to_string(),
                subtask: subtask.parse()?,
                role: role.to_string(),
                score: score.parse().map_err(|e| bad(format!("score: {e}")))?,
                label: match *label {
                    "1" => true,
                    "0" => false,
                    other => return Err(bad(format!("label {other:?}"))),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips() {
        let mut r = EvalReport {
            step: 40,
            config_hash: "ff".into(),
            metrics: Vec::new(),
        };
        r.push("relation_swap", "group", 1.0 / 3.0, 9);
        r.push("foil", "accuracy", 0.5, 4);
        assert_eq!(parse_report_tsv(&render_report_tsv(&r)).unwrap(), r);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.metrics[0].key(), "relation_swap.group");

        let dir = tempfile::tempdir().unwrap();
        let recs = vec![ScoreRecord {
            item_id: "counting-3".into(),
            subtask: Subtask::Counting,
            role: "pos".into(),
            score: 0.25,
            label: true,
        }];
        let p = dir.path().join("scores.tsv");
        write_score_dump(&p, "ff", &recs).unwrap();
        assert_eq!(read_score_dump(&p).unwrap(), recs);
    }
}
