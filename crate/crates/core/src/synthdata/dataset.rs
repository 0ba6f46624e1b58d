//! Line-delimited dataset files.
//!
//! One record per line, tab-separated:
//!
//! ```text
//! kind  seed  index  grid  text  bbox
//! ```
//!
//! `kind` is `caption`, `object_label`, `attribute_label` or
//! `region_description`; `seed`/`index` identify the scene
//! (`derive_seed(seed, index)`); `grid` is the patch grid as concatenated
//! 16-digit hex IEEE-754 bit patterns; `bbox` is four space-separated
//! decimals `x1 y1 x2 y2` (shortest round-trip form) or `-`. Lines starting
//! with `#` are comments.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::scene::{derive_seed, generate_scene_on, PatchGrid, PATCH_CHANNELS};
use super::{caption_of, detections_of, CaptionSample, DetectionKind, DetectionSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Caption,
    Detection(DetectionKind),
}

impl RecordKind {
    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Caption => "caption",
            RecordKind::Detection(k) => k.name(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "caption" {
            return Ok(RecordKind::Caption);
        }
        DetectionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .map(RecordKind::Detection)
            .ok_or_else(|| Error::parse("dataset record", format!("unknown kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub kind: RecordKind,
    pub seed: u64,
    pub index: u64,
    pub grid: PatchGrid,
    pub text: String,
    pub bbox: Option<BBox>,
}

impl DatasetRecord {
    pub fn from_caption(seed: u64, index: u64, c: &CaptionSample) -> Self {
        Self {
            kind: RecordKind::Caption,
            seed,
            index,
            grid: c.scene.grid.clone(),
            text: c.caption.clone(),
            bbox: None,
        }
    }

    pub fn from_detection(seed: u64, index: u64, d: &DetectionSample) -> Self {
        Self {
            kind: RecordKind::Detection(d.kind),
            seed,
            index,
            grid: d.scene.grid.clone(),
            text: d.text.clone(),
            bbox: Some(d.bbox),
        }
    }

    /// Regenerates the record from `(seed, index)` and checks it is
    /// identical.
    pub fn verify(&self) -> Result<()> {
        let scene = generate_scene_on(derive_seed(self.seed, self.index), self.grid.side);
        let expected = match self.kind {
            RecordKind::Caption => Some(Self::from_caption(self.seed, self.index, &caption_of(&scene))),
            RecordKind::Detection(kind) => detections_of(&scene)
                .iter()
                .filter(|d| d.kind == kind && d.text == self.text)
                .map(|d| Self::from_detection(self.seed, self.index, d))
                .find(|r| r == self),
        };
        match expected {
            Some(r) if r == *self => Ok(()),
            _ => Err(Error::parse(
                "dataset record",
                format!(
                    "record {}/{} ({}) does not match its regenerated sample",
                    self.seed,
                    self.index,
                    self.kind.name()
                ),
            )),
        }
    }
}

pub fn render_record(r: &DatasetRecord) -> String {
    let mut grid = String::with_capacity(r.grid.data.len() * 16);
    for v in &r.grid.data {
        grid.push_str(&format!("{:016x}", v.to_bits()));
    }
    let bbox = match r.bbox {
        Some(b) => format!("{} {} {} {}", b.x1, b.y1, b.x2, b.y2),
        None => "-".to_string(),
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        r.kind.name(),
        r.seed,
        r.index,
        grid,
        r.text,
        bbox
    )
}

pub fn parse_record(line: &str) -> Result<DatasetRecord> {
    let bad = |m: String| Error::parse("dataset record", m);
    let fields: Vec<&str> = line.split('\t').collect();
    let [kind, seed, index, grid, text, bbox] = fields.as_slice() else {
        return Err(bad(format!("expected 6 fields, found {}", fields.len())));
    };
    let kind = RecordKind::parse(kind)?;
    let seed = seed.parse().map_err(|e| bad(format!("seed: {e}")))?;
    let index = index.parse().map_err(|e| bad(format!("index: {e}")))?;
    if grid.len() % 16 != 0 {
        return Err(bad("grid payload length is not a multiple of 16".into()));
    }
    let data = (0..grid.len() / 16)
        .map(|i| {
            u64::from_str_radix(&grid[i * 16..(i + 1) * 16], 16)
                .map(f64::from_bits)
                .map_err(|e| bad(format!("grid: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let patches = data.len() / PATCH_CHANNELS;
    let side = (patches as f64).sqrt().round() as usize;
    if side * side * PATCH_CHANNELS != data.len() || side == 0 {
        return Err(bad(format!("grid payload of {} values is not square", data.len())));
    }
    let bbox = if *bbox == "-" {
        None
    } else {
        let c: Vec<f64> = bbox
            .split(' ')
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("bbox: {e}"))))
            .collect::<Result<_>>()?;
        let [x1, y1, x2, y2] = c.as_slice() else {
            return Err(bad("bbox needs four values".into()));
        };
        Some(BBox::new(*x1, *y1, *x2, *y2)?)
    };
    Ok(DatasetRecord {
        kind,
        seed,
        index,
        grid: PatchGrid { side, data },
        text: text.to_string(),
        bbox,
    })
}

pub fn write_dataset(path: &Path, header: &str, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for line in header.lines() {
        writeln!(w, "# {line}")?;
    }
    for r in records {
        writeln!(w, "{}", render_record(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(parse_record)
        .collect()
}

pub fn verify_dataset(records: &[DatasetRecord]) -> Result<()> {
    records.iter().try_for_each(DatasetRecord::verify)
}
