//! Append-only per-step loss log.
//!
//! ```text
//! # config_hash=<hex>
//! step  batch_kind  cl  itm  mlm  vma_cl  vma_itm  vma_mlm  bbox  pevl_mlm  total  active
//! ```
//!
//! Inactive components are written as `0`; `active` lists the active
//! component names joined by `+`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{LossBundle, LossTerm};
use crate::error::{Error, Result};
use crate::synthdata::BatchKind;

pub const LOSS_LOG_COLUMNS: [&str; 12] = [
    "step", "batch_kind", "cl", "itm", "mlm", "vma_cl", "vma_itm", "vma_mlm", "bbox", "pevl_mlm",
    "total", "active",
];

pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    /// Creates (truncating) the log and writes its header.
    pub fn create(path: &Path, config_hash: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "{}", LOSS_LOG_COLUMNS.join("\t"))?;
        Ok(Self { out })
    }

    /// Opens an existing log for appending.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn record(&mut self, step: usize, kind: BatchKind, b: &LossBundle) -> Result<()> {
        let terms = b.terms();
        let values: Vec<String> = terms.iter().map(|(_, t)| t.value.to_string()).collect();
        let active: Vec<&str> = terms.iter().filter(|(_, t)| t.active).map(|(n, _)| *n).collect();
        writeln!(
            self.out,
            "{step}\t{}\t{}\t{}\t{}",
            kind.name(),
            values.join("\t"),
            b.total,
            active.join("+")
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a loss log back as `(step, kind, bundle)` rows.
pub fn parse_loss_log(text: &str) -> Result<Vec<(usize, BatchKind, LossBundle)>> {
    let bad = |m: String| Error::parse("loss log", m);
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if !header_seen {
            if f != LOSS_LOG_COLUMNS {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        if f.len() != LOSS_LOG_COLUMNS.len() {
            return Err(bad(format!("expected {} fields in {line:?}", LOSS_LOG_COLUMNS.len())));
        }
        let step = f[0].parse().map_err(|e| bad(format!("step: {e}")))?;
        let kind = match f[1] {
            "caption" => BatchKind::Caption,
            "detection" => BatchKind::Detection,
            other => return Err(bad(format!("batch kind {other:?}"))),
        };
        let active: Vec<&str> = f[11].split('+').collect();
        let mut terms = [LossTerm::default(); 8];
        for (i, name) in LossBundle::NAMES.iter().enumerate() {
            terms[i] = LossTerm {
                value: f[2 + i].parse().map_err(|e| bad(format!("{name}: {e}")))?,
                active: active.contains(name),
            };
        }
        let [cl, itm, mlm, vma_cl, vma_itm, vma_mlm, bbox, pevl_mlm] = terms;
        rows.push((
            step,
            kind,
            LossBundle {
                cl,
                itm,
                mlm,
                vma_cl,
                vma_itm,
                vma_mlm,
                bbox,
                pevl_mlm,
                total: f[10].parse().map_err(|e| bad(format!("total: {e}")))?,
            },
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.tsv");
        let mut b = LossBundle::default();
        b.cl = LossTerm { value: 1.25, active: true };
        b.bbox = LossTerm { value: 0.1 + 0.2, active: true };
        b.total = b.active_sum();
        let mut log = LossLog::create(&path, "abc").unwrap();
        log.record(0, BatchKind::Caption, &b).unwrap();
        log.flush().unwrap();
        drop(log);
        let mut log = LossLog::append_to(&path).unwrap();
        log.record(1, BatchKind::Detection, &b).unwrap();
        log.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc\n"));
        let rows = parse_loss_log(&text).unwrap();
        assert_eq!(rows, vec![(0, BatchKind::Caption, b), (1, BatchKind::Detection, b)]);
    }
}
