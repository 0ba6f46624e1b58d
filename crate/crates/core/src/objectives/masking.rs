use rand::Rng;

use crate::geometry::BBox;
use crate::model::Vocab;
use crate::synthdata::PatchGrid;

/// Patch `p` is visible iff its cell intersects `bbox` with positive area.
pub fn visual_mask_from_bbox(bbox: &BBox, side: usize) -> Vec<bool> {
    (0..side * side)
        .map(|p| PatchGrid::cell(side, p).intersection_area(bbox) > 0.0)
        .collect()
}

/// Masked-token selection for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmMask {
    /// Token sequences with selected positions replaced by `[MASK]`.
    pub masked: Vec<Vec<usize>>,
    /// Selected positions per sequence.
    pub positions: Vec<Vec<usize>>,
    /// Original token ids at the selected positions.
    pub targets: Vec<Vec<usize>>,
}

impl MlmMask {
    pub fn count(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

/// Per-token masking probability; `None` means never masked.
pub trait MaskPolicy {
    fn rate(&self, vocab: &Vocab, token: usize) -> Option<f64>;
}

/// Every non-special token at one rate.
pub struct WordMasking(pub f64);

impl MaskPolicy for WordMasking {
    fn rate(&self, vocab: &Vocab, token: usize) -> Option<f64> {
        (!vocab.is_special(token)).then_some(self.0)
    }
}

/// Words at `word_rate`, position bins at `position_rate`, delimiters never.
pub struct PositionMasking {
    pub word_rate: f64,
    pub position_rate: f64,
}

impl MaskPolicy for PositionMasking {
    fn rate(&self, vocab: &Vocab, token: usize) -> Option<f64> {
        if vocab.is_special(token) || vocab.is_position_delimiter(token) {
            None
        } else if vocab.is_position_bin(token) {
            Some(self.position_rate)
        } else {
            Some(self.word_rate)
        }
    }
}

fn draw<R: Rng>(tokens: &[Vec<usize>], vocab: &Vocab, policy: &dyn MaskPolicy, rng: &mut R) -> MlmMask {
    let mut out = MlmMask {
        masked: Vec::with_capacity(tokens.len()),
        positions: Vec::with_capacity(tokens.len()),
        targets: Vec::with_capacity(tokens.len()),
    };
    for seq in tokens {
        let mut masked = seq.clone();
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for (i, &t) in seq.iter().enumerate() {
            if let Some(rate) = policy.rate(vocab, t) {
                if rng.random::<f64>() < rate {
                    masked[i] = vocab.mask();
                    positions.push(i);
                    targets.push(t);
                }
            }
        }
        out.masked.push(masked);
        out.positions.push(positions);
        out.targets.push(targets);
    }
    out
}

/// Draws a mask; if nothing was selected, draws once more. Returns `None`
/// when the second draw is also empty, in which case the loss is skipped.
pub fn select_mlm_mask<R: Rng>(
    tokens: &[Vec<usize>],
    vocab: &Vocab,
    policy: &dyn MaskPolicy,
    rng: &mut R,
) -> Option<MlmMask> {
    (0..2)
        .map(|_| draw(tokens, vocab, policy, rng))
        .find(|m| m.count() > 0)
}
