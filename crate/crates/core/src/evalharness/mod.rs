//! Zero-shot evaluation on generated foil sets plus caption retrieval.
//!
//! Protocol per subtask:
//!
//! | subtask | protocol |
//! |---|---|
//! | existence, counting, object_swap, attribute_swap | foil accuracy |
//! | spatial_relation | threshold accuracy (true/false statements) |
//! | relation_swap | Winoground text/image/group |
//! | subject_swap | pairwise ranking accuracy |

mod protocols;
mod report;

pub use protocols::{
    foil_accuracy, pairwise_ranking_accuracy, retrieval_recall, threshold_accuracy,
    winoground_quad, winoground_scores, ScoreMatrix, WinogroundScores,
};
pub use report::{
    parse_report_tsv, read_score_dump, render_report_tsv, write_score_dump, EvalReport, Metric,
    ScoreRecord,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VlmModel;
use crate::synthdata::{
    caption_of, derive_seed, generate_scene_on, make_foils, CaptionSample, FoilPair, Scene,
    Statement, Subtask,
};

/// Scores image-text pairs; higher means a better match.
pub trait Scorer {
    fn score(&self, scene: &Scene, text: &str) -> Result<f64>;

    fn score_many(&self, scene: &Scene, texts: &[&str]) -> Result<Vec<f64>> {
        texts.iter().map(|t| self.score(scene, t)).collect()
    }
}

/// Matching probability of the model's ITM head.
pub struct ModelScorer<'m>(pub &'m VlmModel);

impl Scorer for ModelScorer<'_> {
    fn score(&self, scene: &Scene, text: &str) -> Result<f64> {
        Ok(self.score_many(scene, &[text])?[0])
    }

    fn score_many(&self, scene: &Scene, texts: &[&str]) -> Result<Vec<f64>> {
        let tokens = texts
            .iter()
            .map(|t| self.0.tokenize(t))
            .collect::<Result<Vec<_>>>()?;
        self.0.matching_scores(&scene.grid, &tokens)
    }
}

/// 1 when the statement holds in the scene, else 0.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(&self, scene: &Scene, text: &str) -> Result<f64> {
        Ok(Statement::parse(text)?.holds(scene) as u8 as f64)
    }
}

/// `1 − inner`.
pub struct InvertedScorer<S>(pub S);

impl<S: Scorer> Scorer for InvertedScorer<S> {
    fn score(&self, scene: &Scene, text: &str) -> Result<f64> {
        Ok(1.0 - self.0.score(scene, text)?)
    }
}

pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &Scene, _: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Applies `f` to another scorer's output.
pub struct MappedScorer<S, F>(pub S, pub F);

impl<S: Scorer, F: Fn(f64) -> f64> Scorer for MappedScorer<S, F> {
    fn score(&self, scene: &Scene, text: &str) -> Result<f64> {
        Ok((self.1)(self.0.score(scene, text)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Foil,
    Threshold,
    Winoground,
    Pairwise,
}

impl Protocol {
    pub fn of(subtask: Subtask) -> Protocol {
        match subtask {
            Subtask::Existence | Subtask::Counting | Subtask::ObjectSwap | Subtask::AttributeSwap => {
                Protocol::Foil
            }
            Subtask::SpatialRelation => Protocol::Threshold,
            Subtask::RelationSwap => Protocol::Winoground,
            Subtask::SubjectSwap => Protocol::Pairwise,
        }
    }
}

/// What to generate for evaluation; the item set is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub seed: u64,
    pub grid: usize,
    pub per_subtask: usize,
    pub subtasks: Vec<Subtask>,
    pub retrieval_size: usize,
    pub retrieval_k: Vec<usize>,
}

impl Default for EvalManifest {
    fn default() -> Self {
        Self {
            seed: 1_000_003,
            grid: 4,
            per_subtask: 48,
            subtasks: Subtask::ALL.to_vec(),
            retrieval_size: 16,
            retrieval_k: vec![1, 5],
        }
    }
}

impl EvalManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::parse("manifest", e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Dependency {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        parse_manifest(&text)
    }
}

/// Parses a manifest, reporting unknown subtask names by name.
pub fn parse_manifest(text: &str) -> Result<EvalManifest> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))?;
    if let Some(list) = raw.get("subtasks").and_then(|v| v.as_array()) {
        for name in list.iter().filter_map(|v| v.as_str()) {
            name.parse::<Subtask>()?;
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::parse("manifest", e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub pair: FoilPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub manifest: EvalManifest,
    pub items: Vec<EvalItem>,
    pub retrieval: Vec<CaptionSample>,
}

fn subtask_stream(seed: u64, subtask: Subtask) -> u64 {
    derive_seed(seed, 0x5eed_0000 + subtask as u64)
}

/// Generates `per_subtask` supported foils per subtask, scanning scenes in
/// index order and skipping scenes that cannot realize the subtask.
pub fn generate_eval_set(manifest: &EvalManifest) -> Result<EvalSet> {
    let mut items = Vec::new();
    for &subtask in &manifest.subtasks {
        let stream = subtask_stream(manifest.seed, subtask);
        let budget = 200 * manifest.per_subtask.max(1);
        let mut found = 0;
        for index in 0..budget as u64 {
            if found == manifest.per_subtask {
                break;
            }
            let scene = generate_scene_on(derive_seed(stream, index), manifest.grid);
            match make_foils(&scene, subtask) {
                Ok(pair) => {
                    items.push(EvalItem {
                        id: format!("{}-{index}", subtask.name()),
                        pair,
                    });
                    found += 1;
                }
                Err(Error::Capability { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        if found < manifest.per_subtask {
            return Err(Error::Capability {
                subtask: subtask.name().to_string(),
                reason: format!("only {found} of {} items found", manifest.per_subtask),
            });
        }
    }
    let retrieval_stream = derive_seed(manifest.seed, 0x7e7_0000);
    let retrieval = (0..manifest.retrieval_size as u64)
        .map(|i| caption_of(&generate_scene_on(derive_seed(retrieval_stream, i), manifest.grid)))
        .collect();
    Ok(EvalSet {
        manifest: manifest.clone(),
        items,
        retrieval,
    })
}

/// Scores every item of `set`, returning the aggregated report and one
/// record per scored pair.
pub fn run_benchmark(
    scorer: &dyn Scorer,
    set: &EvalSet,
    step: usize,
    config_hash: &str,
) -> Result<(EvalReport, Vec<ScoreRecord>)> {
    let mut dump = Vec::new();
    let mut report = EvalReport {
        step,
        config_hash: config_hash.to_string(),
        metrics: Vec::new(),
    };
    let mut pooled_foil: Vec<(f64, Vec<f64>)> = Vec::new();

    for &subtask in &set.manifest.subtasks {
        let items: Vec<&EvalItem> = set.items.iter().filter(|i| i.pair.subtask == subtask).collect();
        if items.is_empty() {
            continue;
        }
        let protocol = Protocol::of(subtask);
        let mut record = |id: &str, role: &str, score: f64, label: bool| {
            if !score.is_finite() {
                return Err(Error::Numeric(format!("score for {id}/{role} is {score}")));
            }
            dump.push(ScoreRecord {
                item_id: id.to_string(),
                subtask,
                role: role.to_string(),
                score,
                label,
            });
            Ok(())
        };
        let n = items.len();
        match protocol {
            Protocol::Winoground => {
                let mut quads = Vec::with_capacity(n);
                for it in &items {
                    let p = &it.pair;
                    let texts = [p.positive_text.as_str(), p.negative_text.as_str()];
                    let col0 = scorer.score_many(&p.positive_scene, &texts)?;
                    let col1 = scorer.score_many(&p.negative_scene, &texts)?;
                    let s: ScoreMatrix = [[col0[0], col1[0]], [col0[1], col1[1]]];
                    for (role, v, label) in [
                        ("t0i0", s[0][0], true),
                        ("t0i1", s[0][1], false),
                        ("t1i0", s[1][0], false),
                        ("t1i1", s[1][1], true),
                    ] {
                        record(&it.id, role, v, label)?;
                    }
                    quads.push(s);
                }
                let w = winoground_scores(&quads)?;
                report.push(subtask.name(), "text", w.text, n);
                report.push(subtask.name(), "image", w.image, n);
                report.push(subtask.name(), "group", w.group, n);
            }
            _ => {
                let mut pairs = Vec::with_capacity(n);
                for it in &items {
                    let p = &it.pair;
                    let s = scorer.score_many(&p.positive_scene, &[&p.positive_text, &p.negative_text])?;
                    record(&it.id, "pos", s[0], true)?;
                    record(&it.id, "neg", s[1], false)?;
                    pairs.push((s[0], s[1]));
                }
                match protocol {
                    Protocol::Foil => {
                        let groups: Vec<(f64, Vec<f64>)> = pairs.iter().map(|&(p, q)| (p, vec![q])).collect();
                        report.push(subtask.name(), "foil_accuracy", foil_accuracy(&groups)?, n);
                        pooled_foil.extend(groups);
                    }
                    Protocol::Threshold => {
                        let scored: Vec<(f64, bool)> =
                            pairs.iter().flat_map(|&(p, q)| [(p, true), (q, false)]).collect();
                        report.push(subtask.name(), "threshold_accuracy", threshold_accuracy(&scored)?, 2 * n);
                    }
                    Protocol::Pairwise => {
                        report.push(subtask.name(), "pairwise_accuracy", pairwise_ranking_accuracy(&pairs)?, n);
                    }
                    Protocol::Winoground => unreachable!(),
                }
            }
        }
    }
    if !pooled_foil.is_empty() {
        report.push("foil", "accuracy", foil_accuracy(&pooled_foil)?, pooled_foil.len());
    }

    if !set.retrieval.is_empty() {
        let texts: Vec<&str> = set.retrieval.iter().map(|c| c.caption.as_str()).collect();
        let table = set
            .retrieval
            .iter()
            .map(|c| scorer.score_many(&c.scene, &texts))
            .collect::<Result<Vec<_>>>()?;
        let n = table.len();
        for &k in &set.manifest.retrieval_k {
            let (tr, ir) = retrieval_recall(&table, k)?;
            report.push("retrieval", &format!("text_r{k}"), tr, n);
            report.push("retrieval", &format!("image_r{k}"), ir, n);
        }
    }
    Ok((report, dump))
}
