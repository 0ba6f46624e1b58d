//! Box coordinates as text tokens: `< x1 y1 x2 y2 >` inserted after an
//! entity mention, each coordinate quantized to one of `bins` tokens.

use super::vocab::{POS_CLOSE, POS_OPEN};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Scales `coord` to pixel units of `image_extent` and maps it to a bin.
pub fn quantize(coord: f64, bins: usize, image_extent: usize) -> usize {
    let px = coord * image_extent as f64;
    let bin = (px * bins as f64 / image_extent as f64).floor();
    (bin.max(0.0) as usize).min(bins - 1)
}

/// Center of `bin` in normalized coordinates.
pub fn dequantize(bin: usize, bins: usize) -> f64 {
    (bin as f64 + 0.5) / bins as f64
}

pub fn position_bins(bbox: &BBox, bins: usize, image_extent: usize) -> [usize; 4] {
    bbox.corners().map(|c| quantize(c, bins, image_extent))
}

/// Inserts `<`, four bin tokens and `>` right after `words[..entity_end]`.
/// `max_words` bounds the result length.
pub fn encode_position_tokens<S: AsRef<str>>(
    words: &[S],
    entity_end: usize,
    bbox: &BBox,
    bins: usize,
    image_extent: usize,
    max_words: usize,
) -> Result<Vec<String>> {
    if bins < 2 {
        return Err(Error::Configuration(format!("need at least 2 position bins, got {bins}")));
    }
    if !bbox.is_valid() {
        return Err(Error::Numeric(format!("invalid bbox {bbox:?}")));
    }
    if entity_end > words.len() {
        return Err(Error::Index {
            what: "entity span end",
            index: entity_end,
            bound: words.len(),
        });
    }
    let len = words.len() + 6;
    if len > max_words {
        return Err(Error::Length {
            len,
            max: max_words,
        });
    }
    let mut out: Vec<String> = Vec::with_capacity(len);
    out.extend(words[..entity_end].iter().map(|w| w.as_ref().to_string()));
    out.push(POS_OPEN.to_string());
    out.extend(position_bins(bbox, bins, image_extent).iter().map(|b| b.to_string()));
    out.push(POS_CLOSE.to_string());
    out.extend(words[entity_end..].iter().map(|w| w.as_ref().to_string()));
    Ok(out)
}
