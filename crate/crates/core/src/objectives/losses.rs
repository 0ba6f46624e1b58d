use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Graph, Tensor, Var};

/// Symmetric InfoNCE over an N×N similarity matrix scaled by `inv_tau`,
/// matched pairs on the diagonal.
pub fn contrastive_loss(g: &mut Graph, image_feats: Var, text_feats: Var, inv_tau: Var) -> Result<Var> {
    let n = g.shape(image_feats)[0];
    if n < 2 {
        return Err(Error::BatchSize { got: n, need: 2 });
    }
    if g.shape(text_feats) != g.shape(image_feats) {
        return Err(Error::dims("contrastive_loss", g.shape(image_feats), g.shape(text_feats)));
    }
    let tt = g.transpose(text_feats)?;
    let sims = g.matmul(image_feats, tt)?;
    let logits = g.scale_by(sims, inv_tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let i2t = g.softmax_cross_entropy(logits, &diag)?;
    let lt = g.transpose(logits)?;
    let t2i = g.softmax_cross_entropy(lt, &diag)?;
    let s = g.add(i2t, t2i)?;
    Ok(g.scale(s, 0.5))
}

/// Two-class cross-entropy of matching logits (n×2, class 1 = match).
pub fn itm_loss(g: &mut Graph, logits: Var, is_match: &[bool]) -> Result<Var> {
    let targets: Vec<usize> = is_match.iter().map(|&m| m as usize).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// For each image row of `sims` (images × texts), the most similar text
/// belonging to a different image. `same_image(i, j)` says whether image
/// `i` and the image paired with text `j` are identical.
pub fn hardest_negatives(sims: &Tensor, same_image: impl Fn(usize, usize) -> bool) -> Result<Vec<usize>> {
    (0..sims.rows())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &s) in sims.row(i).iter().enumerate() {
                if same_image(i, j) {
                    continue;
                }
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.map(|(j, _)| j).ok_or_else(|| {
                Error::NegativeMining(format!("no text in the batch belongs to a different image than item {i}"))
            })
        })
        .collect()
}

/// Scalar box loss `λ₁·‖p − t‖₁ + λ₂·(1 − GIoU(p, t))`.
pub fn bbox_loss(pred: &BBox, target: &BBox, l1_weight: f64, giou_weight: f64) -> f64 {
    let l1: f64 = pred
        .corners()
        .iter()
        .zip(target.corners())
        .map(|(a, b)| (a - b).abs())
        .sum();
    l1_weight * l1 + giou_weight * (1.0 - pred.giou(target))
}

/// Mean box loss over the rows of `pred` (n×4 corner form) on the graph.
pub fn bbox_loss_var(
    g: &mut Graph,
    pred: Var,
    targets: &[BBox],
    l1_weight: f64,
    giou_weight: f64,
) -> Result<Var> {
    let n = targets.len();
    if g.shape(pred) != [n, 4] {
        return Err(Error::dims("bbox_loss", g.shape(pred), &[n, 4]));
    }
    let t_data: Vec<f64> = targets.iter().flat_map(|b| b.corners()).collect();
    let t = g.constant(Tensor::matrix(n, 4, t_data)?);

    let diff = g.sub(pred, t)?;
    let l1 = g.abs(diff);
    let ones = g.constant(Tensor::matrix(4, 1, vec![1.0; 4])?);
    let l1 = g.matmul(l1, ones)?;

    let col = |g: &mut Graph, v: Var, c: usize| g.slice_cols(v, c, 1);
    let (px1, py1, px2, py2) = (col(g, pred, 0)?, col(g, pred, 1)?, col(g, pred, 2)?, col(g, pred, 3)?);
    let (tx1, ty1, tx2, ty2) = (col(g, t, 0)?, col(g, t, 1)?, col(g, t, 2)?, col(g, t, 3)?);

    let side = |g: &mut Graph, lo: Var, hi: Var| g.sub(hi, lo);
    let pw = side(g, px1, px2)?;
    let ph = side(g, py1, py2)?;
    let p_area = g.mul(pw, ph)?;
    let tw = side(g, tx1, tx2)?;
    let th = side(g, ty1, ty2)?;
    let t_area = g.mul(tw, th)?;

    let ix1 = g.maximum(px1, tx1)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw = side(g, ix1, ix2)?;
    let iw = g.clamp_min(iw, 0.0);
    let ih = side(g, iy1, iy2)?;
    let ih = g.clamp_min(ih, 0.0);
    let inter = g.mul(iw, ih)?;
    let union = g.add(p_area, t_area)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let cx1 = g.minimum(px1, tx1)?;
    let cy1 = g.minimum(py1, ty1)?;
    let cx2 = g.maximum(px2, tx2)?;
    let cy2 = g.maximum(py2, ty2)?;
    let cw = side(g, cx1, cx2)?;
    let ch = side(g, cy1, cy2)?;
    let c_area = g.mul(cw, ch)?;
    let slack = g.sub(c_area, union)?;
    let slack = g.div(slack, c_area)?;
    let giou = g.sub(iou, slack)?;
    let one_minus = g.scale(giou, -1.0);
    let one_minus = g.add_const(one_minus, 1.0);

    let a = g.scale(l1, l1_weight);
    let b = g.scale(one_minus, giou_weight);
    let per_row = g.add(a, b)?;
    Ok(g.mean(per_row))
}
