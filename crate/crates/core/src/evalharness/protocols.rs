//! Scoring protocols. Every comparison is strict: ties count as failures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matching scores of a Winoground-style quad: `s[i][j]` scores caption `i`
/// against image `j`; caption `i` belongs to image `i`.
pub type ScoreMatrix = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinogroundScores {
    pub text: f64,
    pub image: f64,
    pub group: f64,
}

pub fn pairwise_ranking_accuracy(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairwise ranking pairs"));
    }
    let correct = pairs.iter().filter(|(p, n)| p > n).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// True-labeled items must score above 0.5, false-labeled below.
pub fn threshold_accuracy(scored: &[(f64, bool)]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Empty("threshold items"));
    }
    let correct = scored
        .iter()
        .filter(|(s, label)| if *label { *s > 0.5 } else { *s < 0.5 })
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Each group is a positive score and its negatives; a group is correct
/// when the positive beats every negative.
pub fn foil_accuracy(groups: &[(f64, Vec<f64>)]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Empty("foil groups"));
    }
    if groups.iter().any(|(_, negs)| negs.is_empty()) {
        return Err(Error::Empty("foil group negatives"));
    }
    let correct = groups
        .iter()
        .filter(|(p, negs)| negs.iter().all(|n| p > n))
        .count();
    Ok(correct as f64 / groups.len() as f64)
}

pub fn winoground_quad(s: &ScoreMatrix) -> (bool, bool) {
    let text = s[0][0] > s[1][0] && s[1][1] > s[0][1];
    let image = s[0][0] > s[0][1] && s[1][1] > s[1][0];
    (text, image)
}

pub fn winoground_scores(quads: &[ScoreMatrix]) -> Result<WinogroundScores> {
    if quads.is_empty() {
        return Err(Error::Empty("winoground quads"));
    }
    let (mut t, mut i, mut g) = (0usize, 0usize, 0usize);
    for q in quads {
        let (text, image) = winoground_quad(q);
        t += text as usize;
        i += image as usize;
        g += (text && image) as usize;
    }
    let n = quads.len() as f64;
    Ok(WinogroundScores {
        text: t as f64 / n,
        image: i as f64 / n,
        group: g as f64 / n,
    })
}

/// Rank of `table[i][i]` within its row, 0-based; equal scores at lower
/// indices rank first.
fn rank_in(scores: impl Iterator<Item = f64>, target: usize, value: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| j != target && (s > value || (s == value && j < target)))
        .count()
}

/// `table[i][j]` scores image `i` against text `j`; matched pairs lie on the
/// diagonal. Returns `(text retrieval, image retrieval)` recall at `k`:
/// rows retrieve texts for an image, columns retrieve images for a text.
pub fn retrieval_recall(table: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    let n = table.len();
    if n == 0 {
        return Err(Error::Empty("retrieval table"));
    }
    if let Some(row) = table.iter().find(|r| r.len() != n) {
        return Err(Error::dims("retrieval table", &[n, row.len()], &[n, n]));
    }
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let text_hits = (0..n)
        .filter(|&i| rank_in(table[i].iter().copied(), i, table[i][i]) < k)
        .count();
    let image_hits = (0..n)
        .filter(|&j| rank_in(table.iter().map(|r| r[j]), j, table[j][j]) < k)
        .count();
    Ok((text_hits as f64 / n as f64, image_hits as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_and_threshold_cases() {
        assert_eq!(pairwise_ranking_accuracy(&[(0.7, 0.3)]).unwrap(), 1.0);
        assert_eq!(pairwise_ranking_accuracy(&[(0.5, 0.5)]).unwrap(), 0.0);
        let p = pairwise_ranking_accuracy(&[(0.7, 0.3), (0.2, 0.3), (0.9, 0.1)]).unwrap();
        assert_eq!(p, 2.0 / 3.0);
        assert!(matches!(pairwise_ranking_accuracy(&[]), Err(Error::Empty(_))));
        assert_eq!(threshold_accuracy(&[(0.6, true)]).unwrap(), 1.0);
        assert_eq!(threshold_accuracy(&[(0.5, true)]).unwrap(), 0.0);
        assert_eq!(threshold_accuracy(&[(0.5, false)]).unwrap(), 0.0);
        assert_eq!(threshold_accuracy(&[(0.4, false)]).unwrap(), 1.0);
    }

    #[test]
    fn foil_groups() {
        assert_eq!(foil_accuracy(&[(0.9, vec![0.1, 0.8])]).unwrap(), 1.0);
        assert_eq!(foil_accuracy(&[(0.8, vec![0.8])]).unwrap(), 0.0);
        assert!(foil_accuracy(&[(0.8, vec![])]).is_err());
        let pairs = [(0.3, 0.2), (0.4, 0.4), (0.1, 0.6)];
        let groups: Vec<(f64, Vec<f64>)> = pairs.iter().map(|&(p, n)| (p, vec![n])).collect();
        assert_eq!(foil_accuracy(&groups).unwrap(), pairwise_ranking_accuracy(&pairs).unwrap());
    }

    #[test]
    fn winoground_cases() {
        let w = winoground_scores(&[[[1.0, 0.0], [0.0, 1.0]]]).unwrap();
        assert_eq!((w.text, w.image, w.group), (1.0, 1.0, 1.0));
        let w = winoground_scores(&[[[0.9, 0.8], [0.2, 0.7]]]).unwrap();
        assert_eq!((w.text, w.image, w.group), (0.0, 1.0, 0.0));
        let w = winoground_scores(&[[[0.5; 2]; 2]]).unwrap();
        assert_eq!((w.text, w.image, w.group), (0.0, 0.0, 0.0));
    }

    #[test]
    fn retrieval_cases() {
        let n = 5;
        let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
        assert_eq!(retrieval_recall(&eye, 1).unwrap(), (1.0, 1.0));
        let flat = vec![vec![0.3; n]; n];
        assert_eq!(retrieval_recall(&flat, 1).unwrap(), (0.2, 0.2));
        assert_eq!(retrieval_recall(&flat, n).unwrap(), (1.0, 1.0));
        assert!(matches!(retrieval_recall(&flat, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(retrieval_recall(&flat, 6), Err(Error::KOutOfRange { .. })));
        assert!(retrieval_recall(&[vec![1.0, 2.0]], 1).is_err());
    }
}
