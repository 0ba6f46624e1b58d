//! Run configuration: a TOML file of `key = value` lines grouped in
//! sections. The top-level `seed` is required; everything else has
//! defaults.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! hidden_dim = 64
//!
//! [objectives]
//! loss = "full"
//! sources = "captions+region_descriptions"
//!
//! [train]
//! steps = 1000
//! cadence = 250
//! ```

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalharness::EvalManifest;
use crate::model::ModelConfig;
use crate::objectives::{AblationConfig, LossArm, ObjectiveParams, OptimizerKind, TrainSettings};
use crate::synthdata::{derive_seed, SourceSet, Subtask, PATCH_CHANNELS};

mod text_form {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectivesSection {
    #[serde(with = "text_form")]
    pub loss: LossArm,
    #[serde(with = "text_form")]
    pub sources: SourceSet,
    pub mask_rate: f64,
    pub position_mask_rate: f64,
    pub bbox_l1_weight: f64,
    pub bbox_giou_weight: f64,
}

impl Default for ObjectivesSection {
    fn default() -> Self {
        let p = ObjectiveParams::default();
        Self {
            loss: LossArm::Full,
            sources: SourceSet::all(),
            mask_rate: p.mask_rate,
            position_mask_rate: p.position_mask_rate,
            bbox_l1_weight: p.bbox_l1_weight,
            bbox_giou_weight: p.bbox_giou_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub caption_batch: usize,
    pub detection_batch: usize,
    #[serde(with = "text_form")]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    /// Checkpoint and evaluation interval in steps.
    pub cadence: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            caption_batch: 8,
            detection_batch: 8,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            clip_norm: 1.0,
            cadence: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Defaults to a value derived from the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub scenes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { seed: None, scenes: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub per_subtask: usize,
    pub subtasks: Vec<Subtask>,
    pub retrieval_size: usize,
    pub retrieval_k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = EvalManifest::default();
        Self {
            seed: m.seed,
            per_subtask: m.per_subtask,
            subtasks: m.subtasks,
            retrieval_size: m.retrieval_size,
            retrieval_k: m.retrieval_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objectives: ObjectivesSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// 1-based line of `key` inside `[section]` (top level when `section` is
/// empty), or of the section header when the key is absent.
fn line_of(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = i + 1;
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            model: ModelConfig::default(),
            objectives: ObjectivesSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }

    /// Parses and validates `text`; errors name `origin` and a line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Validation {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        if let Err((section, key, message)) = cfg.check() {
            return Err(Error::Validation {
                path: origin.to_string(),
                line: line_of(text, section, key),
                message: format!("{}{key}: {message}", if section.is_empty() { String::new() } else { format!("{section}.") }),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Dependency {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// SHA-256 of the canonical rendering with the output directory
    /// cleared, so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        Sha256::digest(c.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn check(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        let m = &self.model;
        if m.patch_channels != PATCH_CHANNELS {
            return Err(("model", "patch_channels", format!("scenes carry {PATCH_CHANNELS} channels")));
        }
        if let Err(e) = m.validate() {
            let key = ["heads", "hidden_dim", "max_text_len", "position_bins", "proj_dim", "patch_grid"]
                .into_iter()
                .find(|k| e.to_string().contains(k))
                .unwrap_or("");
            return Err(("model", key, e.to_string()));
        }
        let o = &self.objectives;
        self.ablation().validate().map_err(|e| ("objectives", "loss", e.to_string()))?;
        let pevl = o.loss == LossArm::Pevl;
        if pevl != m.position_bins.is_some() {
            return Err((
                "model",
                "position_bins",
                format!("must be set exactly when loss is {:?}", LossArm::Pevl.name()),
            ));
        }
        for (key, rate) in [("mask_rate", o.mask_rate), ("position_mask_rate", o.position_mask_rate)] {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(("objectives", key, format!("{rate} is outside (0, 1]")));
            }
        }
        for (key, w) in [("bbox_l1_weight", o.bbox_l1_weight), ("bbox_giou_weight", o.bbox_giou_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(("objectives", key, format!("{w} must be finite and non-negative")));
            }
        }
        let t = &self.train;
        if t.steps == 0 {
            return Err(("train", "steps", "must be positive".into()));
        }
        if t.cadence == 0 || !t.steps.is_multiple_of(t.cadence) {
            return Err(("train", "cadence", format!("{} does not divide steps {}", t.cadence, t.steps)));
        }
        for (key, b) in [("caption_batch", t.caption_batch), ("detection_batch", t.detection_batch)] {
            if b < 2 {
                return Err(("train", key, format!("{b} is below the minimum of 2")));
            }
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(("train", "lr", format!("{} must be positive", t.lr)));
        }
        if !(t.clip_norm > 0.0) {
            return Err(("train", "clip_norm", format!("{} must be positive", t.clip_norm)));
        }
        if self.data.scenes < 2 {
            return Err(("data", "scenes", "need at least 2 scenes".into()));
        }
        let e = &self.eval;
        if e.per_subtask == 0 || e.subtasks.is_empty() {
            return Err(("eval", "per_subtask", "evaluation needs at least one item".into()));
        }
        if let Some(&k) = e.retrieval_k.iter().find(|&&k| k == 0 || k > e.retrieval_size) {
            return Err(("eval", "retrieval_k", format!("{k} is outside 1..={}", e.retrieval_size)));
        }
        Ok(())
    }

    pub fn ablation(&self) -> AblationConfig {
        self.objectives.loss.config(self.objectives.sources)
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or_else(|| derive_seed(self.seed, 0xda7a))
    }

    pub fn train_settings(&self) -> TrainSettings {
        let o = &self.objectives;
        let t = &self.train;
        TrainSettings {
            seed: self.seed,
            steps: t.steps,
            caption_batch: t.caption_batch,
            detection_batch: t.detection_batch,
            optimizer: t.optimizer,
            lr: t.lr,
            clip_norm: t.clip_norm,
            objective: ObjectiveParams {
                mask_rate: o.mask_rate,
                position_mask_rate: o.position_mask_rate,
                bbox_l1_weight: o.bbox_l1_weight,
                bbox_giou_weight: o.bbox_giou_weight,
            },
            ablation: self.ablation(),
        }
    }

    pub fn manifest(&self) -> EvalManifest {
        let e = &self.eval;
        EvalManifest {
            seed: e.seed,
            grid: self.model.patch_grid,
            per_subtask: e.per_subtask,
            subtasks: e.subtasks.clone(),
            retrieval_size: e.retrieval_size,
            retrieval_k: e.retrieval_k.clone(),
        }
    }
}
