//! Loss suite and the multi-pass training step.
//!
//! Caption batches contribute the alignment losses (contrastive, matching,
//! masked language modelling). Detection batches contribute the same three
//! on (full image, region text) and, depending on [`AblationConfig`], the
//! visually masked triple, box regression, or position-token MLM.

mod log;
mod losses;
mod masking;
mod run;

pub use log::{parse_loss_log, LossLog, LOSS_LOG_COLUMNS};
pub use run::{TrainData, TrainSettings, TrainingRun};
pub use losses::{bbox_loss, bbox_loss_var, contrastive_loss, hardest_negatives, itm_loss};
pub use masking::{
    select_mlm_mask, visual_mask_from_bbox, MaskPolicy, MlmMask, PositionMasking, WordMasking,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{encode_position_tokens, Forward, VlmModel};
use crate::synthdata::{BatchKind, CaptionSample, DetectionSample, PatchGrid, Shape, SourceSet};
use crate::tensor::{Graph, Tensor, Var};

/// Loss configuration of one ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_vma: bool,
    pub use_bbox: bool,
    pub use_pevl_tokens: bool,
    pub sources: SourceSet,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        if !self.sources.captions {
            return bad("the captions source is required");
        }
        if (self.use_vma || self.use_bbox || self.use_pevl_tokens) && !self.sources.has_detection() {
            return bad("visual masking, box regression and position tokens need a detection source");
        }
        if self.use_pevl_tokens && (self.use_vma || self.use_bbox) {
            return bad("position tokens are a separate arm from visual masking and box regression");
        }
        Ok(())
    }

    pub fn arm(&self) -> LossArm {
        match (self.use_vma, self.use_bbox, self.use_pevl_tokens) {
            (_, _, true) => LossArm::Pevl,
            (true, true, _) => LossArm::Full,
            (true, false, _) => LossArm::AVma,
            (false, true, _) => LossArm::ABbox,
            (false, false, _) => LossArm::A,
        }
    }
}

/// Named loss compositions for the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossArm {
    A,
    AVma,
    ABbox,
    Full,
    Pevl,
}

impl LossArm {
    pub const ALL: [LossArm; 5] = [LossArm::A, LossArm::AVma, LossArm::ABbox, LossArm::Full, LossArm::Pevl];

    pub fn name(self) -> &'static str {
        match self {
            LossArm::A => "A",
            LossArm::AVma => "A+VMA",
            LossArm::ABbox => "A+bbox",
            LossArm::Full => "full",
            LossArm::Pevl => "pevl",
        }
    }

    pub fn config(self, sources: SourceSet) -> AblationConfig {
        let (use_vma, use_bbox, use_pevl_tokens) = match self {
            LossArm::A => (false, false, false),
            LossArm::AVma => (true, false, false),
            LossArm::ABbox => (false, true, false),
            LossArm::Full => (true, true, false),
            LossArm::Pevl => (false, false, true),
        };
        AblationConfig {
            use_vma,
            use_bbox,
            use_pevl_tokens,
            sources,
        }
    }
}

impl fmt::Display for LossArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossArm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Configuration(format!("unknown loss arm {s:?}")))
    }
}

/// Masking rates and box-loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    pub mask_rate: f64,
    pub position_mask_rate: f64,
    pub bbox_l1_weight: f64,
    pub bbox_giou_weight: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            position_mask_rate: 0.5,
            bbox_l1_weight: 1.0,
            bbox_giou_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub value: f64,
    pub active: bool,
}

impl LossTerm {
    fn of(g: &Graph, v: Option<Var>) -> Self {
        match v {
            Some(v) => LossTerm {
                value: g.scalar(v),
                active: true,
            },
            None => LossTerm::default(),
        }
    }
}

/// Loss components of one step; inactive components are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cl: LossTerm,
    pub itm: LossTerm,
    pub mlm: LossTerm,
    pub vma_cl: LossTerm,
    pub vma_itm: LossTerm,
    pub vma_mlm: LossTerm,
    pub bbox: LossTerm,
    pub pevl_mlm: LossTerm,
    pub total: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 8] = [
        "cl", "itm", "mlm", "vma_cl", "vma_itm", "vma_mlm", "bbox", "pevl_mlm",
    ];

    pub fn terms(&self) -> [(&'static str, LossTerm); 8] {
        let t = [
            self.cl,
            self.itm,
            self.mlm,
            self.vma_cl,
            self.vma_itm,
            self.vma_mlm,
            self.bbox,
            self.pevl_mlm,
        ];
        std::array::from_fn(|i| (Self::NAMES[i], t[i]))
    }

    pub fn active_sum(&self) -> f64 {
        self.terms()
            .iter()
            .filter(|(_, t)| t.active)
            .map(|(_, t)| t.value)
            .sum()
    }
}

/// Graph handles of every active loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cl: Option<Var>,
    pub itm: Option<Var>,
    pub mlm: Option<Var>,
    pub vma_cl: Option<Var>,
    pub vma_itm: Option<Var>,
    pub vma_mlm: Option<Var>,
    pub bbox: Option<Var>,
    pub pevl_mlm: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn bundle(&self, g: &Graph) -> LossBundle {
        let mut b = LossBundle {
            cl: LossTerm::of(g, self.cl),
            itm: LossTerm::of(g, self.itm),
            mlm: LossTerm::of(g, self.mlm),
            vma_cl: LossTerm::of(g, self.vma_cl),
            vma_itm: LossTerm::of(g, self.vma_itm),
            vma_mlm: LossTerm::of(g, self.vma_mlm),
            bbox: LossTerm::of(g, self.bbox),
            pevl_mlm: LossTerm::of(g, self.pevl_mlm),
            total: 0.0,
        };
        b.total = b.active_sum();
        b
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        match name {
            "cl" => self.cl,
            "itm" => self.itm,
            "mlm" => self.mlm,
            "vma_cl" => self.vma_cl,
            "vma_itm" => self.vma_itm,
            "vma_mlm" => self.vma_mlm,
            "bbox" => self.bbox,
            "pevl_mlm" => self.pevl_mlm,
            "total" => Some(self.total),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub grid: PatchGrid,
    pub text: String,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub kind: BatchKind,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn captions(samples: &[&CaptionSample]) -> Self {
        Self {
            kind: BatchKind::Caption,
            items: samples
                .iter()
                .map(|s| BatchItem {
                    grid: s.scene.grid.clone(),
                    text: s.caption.clone(),
                    bbox: None,
                })
                .collect(),
        }
    }

    pub fn detections(samples: &[&DetectionSample]) -> Self {
        Self {
            kind: BatchKind::Detection,
            items: samples
                .iter()
                .map(|s| BatchItem {
                    grid: s.scene.grid.clone(),
                    text: s.text.clone(),
                    bbox: Some(s.bbox),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Index just past the first shape noun: the grounded entity's mention.
pub fn entity_span_end<S: AsRef<str>>(words: &[S]) -> usize {
    words
        .iter()
        .position(|w| {
            Shape::ALL
                .iter()
                .any(|s| s.noun() == w.as_ref() || s.plural() == w.as_ref())
        })
        .map_or(words.len(), |i| i + 1)
}

/// Token ids of `text` with position tokens for `bbox` after its entity.
pub fn position_tokens(model: &VlmModel, text: &str, bbox: &BBox) -> Result<Vec<usize>> {
    let c = model.config();
    let bins = c.position_bins.ok_or_else(|| {
        Error::Configuration("position tokens need a model with position_bins".into())
    })?;
    let words: Vec<&str> = text.split_whitespace().collect();
    let with_pos = encode_position_tokens(
        &words,
        entity_span_end(&words),
        bbox,
        bins,
        c.image_extent,
        c.max_text_len.saturating_sub(2),
    )?;
    model.vocab().encode_words(&with_pos, c.max_text_len)
}

struct AlignOut {
    cl: Var,
    itm: Var,
    mlm: Option<Var>,
    positive_fused: Vec<Var>,
}

struct Encoded<'a> {
    grids: Vec<&'a PatchGrid>,
    tokens: Vec<Vec<usize>>,
    text_states: Vec<Var>,
    text_feats: Var,
    mlm: Option<(MlmMask, Vec<Var>)>,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn row_sims(g: &Graph, a: Var, b: Var) -> Result<Tensor> {
    let (a, b) = (g.value(a), g.value(b));
    let (n, m) = (a.rows(), b.rows());
    let data = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum())
        .collect();
    Tensor::matrix(n, m, data)
}

/// Masked language modelling over `masked` token states fused with the
/// given views; `None` when nothing is masked in the batch.
fn mlm_pass(
    f: &Forward,
    g: &mut Graph,
    mask: &MlmMask,
    masked_states: &[Var],
    vision: &[Var],
    visibility: Option<&[Vec<bool>]>,
) -> Result<Option<Var>> {
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for i in 0..mask.masked.len() {
        if mask.positions[i].is_empty() {
            continue;
        }
        let vis = visibility.map(|v| v[i].as_slice());
        let fused = f.fuse(g, masked_states[i], &mask.masked[i], vision[i], vis)?;
        logits.push(f.mlm_logits(g, fused, &mask.positions[i])?);
        targets.extend_from_slice(&mask.targets[i]);
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let all = g.concat_rows(&logits)?;
    g.softmax_cross_entropy(all, &targets).map(Some)
}

/// Contrastive, matching and (optionally) MLM losses for one image view.
fn align_pass(
    f: &Forward,
    g: &mut Graph,
    enc: &Encoded,
    vision: &[Var],
    visibility: Option<&[Vec<bool>]>,
) -> Result<AlignOut> {
    let n = vision.len();
    let feats = vision
        .iter()
        .map(|&v| f.image_feat(g, v))
        .collect::<Result<Vec<_>>>()?;
    let image_feats = g.concat_rows(&feats)?;
    let inv_tau = f.inv_temperature(g);
    let cl = contrastive_loss(g, image_feats, enc.text_feats, inv_tau)?;

    let sims = row_sims(g, image_feats, enc.text_feats)?;
    let negatives = hardest_negatives(&sims, |i, j| enc.grids[i].data == enc.grids[j].data)?;
    let mut logits = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut positive_fused = Vec::with_capacity(n);
    for (i, &j) in negatives.iter().enumerate() {
        let vis = visibility.map(|v| v[i].as_slice());
        let pos = f.fuse(g, enc.text_states[i], &enc.tokens[i], vision[i], vis)?;
        logits.push(f.itm_logits(g, pos)?);
        labels.push(true);
        positive_fused.push(pos);
        let neg = f.fuse(g, enc.text_states[j], &enc.tokens[j], vision[i], vis)?;
        logits.push(f.itm_logits(g, neg)?);
        labels.push(false);
    }
    let all = g.concat_rows(&logits)?;
    let itm = itm_loss(g, all, &labels)?;

    let mlm = match &enc.mlm {
        Some((mask, states)) => mlm_pass(f, g, mask, states, vision, visibility)?,
        None => None,
    };
    Ok(AlignOut {
        cl,
        itm,
        mlm,
        positive_fused,
    })
}

/// Builds every active loss for `batch` on the graph. `seed` fixes the MLM
/// masks; identical seeds give identical masks.
pub fn batch_losses(
    f: &Forward,
    g: &mut Graph,
    batch: &Batch,
    cfg: &AblationConfig,
    params: &ObjectiveParams,
    seed: u64,
) -> Result<LossVars> {
    cfg.validate()?;
    let model = f.model();
    let detection = batch.kind == BatchKind::Detection;
    if detection && !cfg.sources.has_detection() {
        return Err(Error::Configuration(
            "detection batch under a configuration without detection sources".into(),
        ));
    }
    if batch.len() < 2 {
        return Err(Error::BatchSize {
            got: batch.len(),
            need: 2,
        });
    }
    let boxes: Vec<BBox> = if detection {
        batch
            .items
            .iter()
            .map(|it| {
                it.bbox.ok_or_else(|| {
                    Error::Configuration("detection batch item without a bounding box".into())
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = batch
        .items
        .iter()
        .map(|it| model.tokenize(&it.text))
        .collect::<Result<Vec<_>>>()?;
    let text_states = tokens
        .iter()
        .map(|t| f.encode_text(g, t))
        .collect::<Result<Vec<_>>>()?;
    let feats = text_states
        .iter()
        .map(|&t| f.text_feat(g, t))
        .collect::<Result<Vec<_>>>()?;
    let text_feats = g.concat_rows(&feats)?;
    let mlm = match select_mlm_mask(&tokens, model.vocab(), &WordMasking(params.mask_rate), &mut rng) {
        Some(mask) => {
            let states = mask
                .masked
                .iter()
                .map(|t| f.encode_text(g, t))
                .collect::<Result<Vec<_>>>()?;
            Some((mask, states))
        }
        None => None,
    };
    let enc = Encoded {
        grids: batch.items.iter().map(|it| &it.grid).collect(),
        tokens,
        text_states,
        text_feats,
        mlm,
    };

    let vision = batch
        .items
        .iter()
        .map(|it| f.encode_image(g, &it.grid, None))
        .collect::<Result<Vec<_>>>()?;
    let full = align_pass(f, g, &enc, &vision, None)?;

    let mut out = LossVars {
        cl: Some(full.cl),
        itm: Some(full.itm),
        mlm: full.mlm,
        vma_cl: None,
        vma_itm: None,
        vma_mlm: None,
        bbox: None,
        pevl_mlm: None,
        total: full.cl,
    };

    if detection && cfg.use_bbox {
        let preds = full
            .positive_fused
            .iter()
            .map(|&h| f.predict_bbox(g, h))
            .collect::<Result<Vec<_>>>()?;
        let pred = g.concat_rows(&preds)?;
        out.bbox = Some(bbox_loss_var(
            g,
            pred,
            &boxes,
            params.bbox_l1_weight,
            params.bbox_giou_weight,
        )?);
    }

    if detection && cfg.use_vma {
        let side = model.config().patch_grid;
        let masks: Vec<Vec<bool>> = boxes.iter().map(|b| visual_mask_from_bbox(b, side)).collect();
        let masked_vision = batch
            .items
            .iter()
            .zip(&masks)
            .map(|(it, m)| f.encode_image(g, &it.grid, Some(m)))
            .collect::<Result<Vec<_>>>()?;
        let vma = align_pass(f, g, &enc, &masked_vision, Some(&masks))?;
        out.vma_cl = Some(vma.cl);
        out.vma_itm = Some(vma.itm);
        out.vma_mlm = vma.mlm;
    }

    if detection && cfg.use_pevl_tokens {
        let pos_tokens = batch
            .items
            .iter()
            .zip(&boxes)
            .map(|(it, b)| position_tokens(model, &it.text, b))
            .collect::<Result<Vec<_>>>()?;
        let policy = PositionMasking {
            word_rate: params.mask_rate,
            position_rate: params.position_mask_rate,
        };
        if let Some(mask) = select_mlm_mask(&pos_tokens, model.vocab(), &policy, &mut rng) {
            let states = mask
                .masked
                .iter()
                .map(|t| f.encode_text(g, t))
                .collect::<Result<Vec<_>>>()?;
            out.pevl_mlm = mlm_pass(f, g, &mask, &states, &vision, None)?;
        }
    }

    let active: Vec<Var> = [
        out.cl,
        out.itm,
        out.mlm,
        out.vma_cl,
        out.vma_itm,
        out.vma_mlm,
        out.bbox,
        out.pevl_mlm,
    ]
    .into_iter()
    .flatten()
    .collect();
    out.total = sum_vars(g, &active)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Configuration(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Gradient step with global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(clip_norm > 0.0) {
            return Err(Error::Configuration(format!(
                "learning rate {lr} and clip norm {clip_norm} must be positive"
            )));
        }
        Ok(Self {
            kind,
            lr,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn sgd(lr: f64, clip_norm: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr, clip_norm)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn apply(&mut self, params: &mut crate::model::ParamStore, grads: &[Vec<f64>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::dims("optimizer", &[params.len()], &[grads.len()]));
        }
        let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {norm} is not finite")));
        }
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gr) in params.iter_mut().zip(grads) {
                    for (w, d) in p.value.data_mut().iter_mut().zip(gr) {
                        *w -= self.lr * scale * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (k, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, d)) in p.value.data_mut().iter_mut().zip(gr).enumerate() {
                        let d = d * scale;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * d;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * d * d;
                        *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Forward, backward and one optimizer update on `batch`.
pub fn training_step(
    model: &mut VlmModel,
    batch: &Batch,
    cfg: &AblationConfig,
    params: &ObjectiveParams,
    opt: &mut Optimizer,
    seed: u64,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let (bundle, grads) = {
        let f = model.forward(&mut g, true);
        let vars = batch_losses(&f, &mut g, batch, cfg, params, seed)?;
        let bundle = vars.bundle(&g);
        if !bundle.total.is_finite() {
            return Err(Error::Numeric(format!("loss {} is not finite", bundle.total)));
        }
        g.backward(vars.total)?;
        let grads: Vec<Vec<f64>> = f
            .vars()
            .iter()
            .zip(model.params().iter())
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec))
            .collect();
        (bundle, grads)
    };
    opt.apply(model.params_mut(), &grads)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{CaptionStream, DetectionKind, DetectionStream};

    fn tiny(bins: Option<usize>) -> VlmModel {
        let mut c = ModelConfig::tiny();
        c.position_bins = bins;
        VlmModel::new(c, 3).unwrap()
    }

    fn detection_batch(n: usize) -> Batch {
        let st = DetectionStream::new(21, 40, 4, &[DetectionKind::RegionDescription]);
        Batch::detections(&st.batch(0, n))
    }

    fn losses(model: &VlmModel, batch: &Batch, cfg: &AblationConfig) -> LossBundle {
        let mut g = Graph::new();
        let f = model.forward(&mut g, false);
        batch_losses(&f, &mut g, batch, cfg, &ObjectiveParams::default(), 5)
            .unwrap()
            .bundle(&g)
    }

    #[test]
    fn ablation_invariants() {
        let all = SourceSet::all();
        for arm in LossArm::ALL {
            arm.config(all).validate().unwrap();
            assert_eq!(arm.config(all).arm(), arm);
            assert_eq!(arm.name().parse::<LossArm>().unwrap(), arm);
        }
        assert!(LossArm::A.config(SourceSet::captions_only()).validate().is_ok());
        assert!(LossArm::Full.config(SourceSet::captions_only()).validate().is_err());
        let mut both = LossArm::Full.config(all);
        both.use_pevl_tokens = true;
        assert!(both.validate().is_err());
    }

    #[test]
    fn caption_batch_composition() {
        let model = tiny(None);
        let caps = CaptionStream::new(4, 8, 4);
        let batch = Batch::captions(&caps.batch(0, 4));
        let b = losses(&model, &batch, &LossArm::A.config(SourceSet::captions_only()));
        assert!(b.cl.active && b.itm.active && b.mlm.active);
        assert!(!b.vma_cl.active && !b.vma_itm.active && !b.vma_mlm.active && !b.bbox.active);
        assert_eq!(b.bbox.value, 0.0);
        assert!((b.total - (b.cl.value + b.itm.value + b.mlm.value)).abs() < 1e-9);
        let full = losses(&model, &batch, &LossArm::Full.config(SourceSet::all()));
        assert_eq!(full, b);
    }

    #[test]
    fn detection_batch_composition() {
        let model = tiny(None);
        let batch = detection_batch(4);
        let b = losses(&model, &batch, &LossArm::Full.config(SourceSet::all()));
        let t = b.terms();
        assert!(t[..7].iter().all(|(_, t)| t.active && t.value >= 0.0 && t.value.is_finite()));
        assert!(!b.pevl_mlm.active);
        let sum = b.cl.value + b.itm.value + b.mlm.value + b.vma_cl.value + b.vma_itm.value + b.vma_mlm.value + b.bbox.value;
        assert!((b.total - sum).abs() < 1e-9);
        let err = {
            let mut g = Graph::new();
            let f = model.forward(&mut g, false);
            batch_losses(&f, &mut g, &batch, &LossArm::A.config(SourceSet::captions_only()), &ObjectiveParams::default(), 0)
                .err()
        };
        assert!(matches!(err, Some(Error::Configuration(_))));
    }

    #[test]
    fn full_box_vma_equals_unmasked() {
        let model = tiny(None);
        let mut batch = detection_batch(3);
        for it in &mut batch.items {
            it.bbox = Some(BBox::full());
        }
        let b = losses(&model, &batch, &LossArm::Full.config(SourceSet::all()));
        assert_eq!(b.vma_cl.value.to_bits(), b.cl.value.to_bits());
        assert_eq!(b.vma_itm.value.to_bits(), b.itm.value.to_bits());
        assert_eq!(b.vma_mlm.value.to_bits(), b.mlm.value.to_bits());
    }

    #[test]
    fn identical_images_cannot_mine_negatives() {
        let model = tiny(None);
        let caps = CaptionStream::new(4, 1, 4);
        let batch = Batch::captions(&caps.batch(0, 3));
        let mut g = Graph::new();
        let f = model.forward(&mut g, false);
        let r = batch_losses(&f, &mut g, &batch, &LossArm::A.config(SourceSet::all()), &ObjectiveParams::default(), 0);
        assert!(matches!(r, Err(Error::NegativeMining(_))));
    }

    #[test]
    fn pevl_arm_uses_position_tokens() {
        let model = tiny(Some(16));
        let batch = detection_batch(3);
        let b = losses(&model, &batch, &LossArm::Pevl.config(SourceSet::all()));
        assert!(b.pevl_mlm.active && !b.bbox.active && !b.vma_cl.active);
        let toks = position_tokens(&model, &batch.items[0].text, &batch.items[0].bbox.unwrap()).unwrap();
        let words: Vec<&str> = toks.iter().map(|&t| model.vocab().token(t).unwrap()).collect();
        let end = entity_span_end(&batch.items[0].text.split_whitespace().collect::<Vec<_>>());
        assert_eq!(words[end + 1], "<");
        assert_eq!(words[end + 6], ">");
        assert!(position_tokens(&tiny(None), "red circle", &BBox::full()).is_err());
    }

    #[test]
    fn training_reduces_loss_on_a_repeated_batch() {
        let mut model = tiny(None);
        let caps = CaptionStream::new(4, 8, 4);
        let batch = Batch::captions(&caps.batch(0, 4));
        let cfg = LossArm::A.config(SourceSet::captions_only());
        let mut opt = Optimizer::sgd(1e-2, 1.0).unwrap();
        let first = training_step(&mut model, &batch, &cfg, &ObjectiveParams::default(), &mut opt, 0).unwrap();
        let mut last = first;
        for _ in 0..20 {
            last = training_step(&mut model, &batch, &cfg, &ObjectiveParams::default(), &mut opt, 0).unwrap();
        }
        assert!(last.total < first.total, "{} !< {}", last.total, first.total);
        assert_eq!(opt.steps_taken(), 21);
    }

    #[test]
    fn optimizer_clips_global_norm() {
        let mut store = crate::model::ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut opt = Optimizer::sgd(1.0, 1.0).unwrap();
        let norm = opt.apply(&mut store, &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(norm, 5.0);
        let w = store.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] + 0.6).abs() < 1e-15 && (w[1] + 0.8).abs() < 1e-15);
        assert!(opt.apply(&mut store, &[vec![f64::NAN, 0.0]]).is_err());
    }
}
