//! Ablation grid specs: `losses=A,full;sources=all|captions+region_descriptions`.
//! Rows are the cross product, losses outermost.

use crate::error::{Error, Result};
use crate::objectives::LossArm;
use crate::synthdata::SourceSet;

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub loss: LossArm,
    pub sources: SourceSet,
}

impl GridRow {
    /// Directory-safe name, e.g. `01_a-vma_captions-object_labels`.
    pub fn dir_name(&self, index: usize) -> String {
        let clean = |s: String| s.to_lowercase().replace('+', "-");
        let sources = if self.sources == SourceSet::all() { "all".to_string() } else { clean(self.sources.to_string()) };
        format!("{index:02}_{}_{sources}", clean(self.loss.name().to_string()))
    }
}

pub fn parse_grid(spec: &str) -> Result<Vec<GridRow>> {
    let bad = |m: String| Error::Configuration(format!("grid {spec:?}: {m}"));
    let (mut losses, mut sources) = (None, None);
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| bad(format!("expected key=value in {part:?}")))?;
        match key.trim() {
            "losses" => {
                losses = Some(value.split(',').map(|v| v.trim().parse::<LossArm>()).collect::<Result<Vec<_>>>()?)
            }
            "sources" => {
                sources = Some(value.split('|').map(|v| v.trim().parse::<SourceSet>()).collect::<Result<Vec<_>>>()?)
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let losses = losses.ok_or_else(|| bad("missing losses".into()))?;
    let sources = sources.unwrap_or_else(|| vec![SourceSet::all()]);
    let mut rows = Vec::new();
    for &loss in &losses {
        for &src in &sources {
            loss.config(src)
                .validate()
                .map_err(|e| bad(format!("{} with {src}: {e}", loss.name())))?;
            let row = GridRow { loss, sources: src };
            if rows.contains(&row) {
                return Err(bad(format!("duplicate row {} with {src}", loss.name())));
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product() {
        let rows = parse_grid("losses=A,full;sources=all").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].loss, LossArm::Full);
        let rows = parse_grid("losses=full;sources=captions+object_labels|captions+region_descriptions").unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].sources.region_descriptions && !rows[1].sources.object_labels);
        assert_eq!(rows[0].dir_name(0), "00_full_captions-object_labels");
        assert_eq!(parse_grid("losses=A").unwrap()[0].sources, SourceSet::all());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(parse_grid("sources=all").is_err());
        assert!(parse_grid("losses=B").is_err());
        assert!(parse_grid("losses=full;sources=captions").is_err());
        assert!(parse_grid("losses=A,A").is_err());
        assert!(parse_grid("loss=A").is_err());
    }
}
