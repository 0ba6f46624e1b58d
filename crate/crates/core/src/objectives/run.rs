//! Deterministic training loop over the interleaved caption/detection
//! schedule.

use serde::{Deserialize, Serialize};

use super::{training_step, AblationConfig, Batch, BatchItem, LossBundle, ObjectiveParams, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::model::VlmModel;
use crate::synthdata::{
    derive_seed, BatchKind, CaptionStream, DatasetRecord, DetectionStream, InterleavedSampler, RecordKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Seeds the per-step masking RNG.
    pub seed: u64,
    pub steps: usize,
    pub caption_batch: usize,
    pub detection_batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    pub objective: ObjectiveParams,
    pub ablation: AblationConfig,
}

impl TrainSettings {
    pub fn new(ablation: AblationConfig) -> Self {
        Self {
            seed: 0,
            steps: 1000,
            caption_batch: 8,
            detection_batch: 8,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            clip_norm: 1.0,
            objective: ObjectiveParams::default(),
            ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.caption_batch < 2 || self.detection_batch < 2 {
            return Err(Error::BatchSize {
                got: self.caption_batch.min(self.detection_batch),
                need: 2,
            });
        }
        Optimizer::new(self.optimizer, self.lr, self.clip_norm).map(|_| ())
    }
}

/// Training examples of the active sources.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub captions: Vec<BatchItem>,
    pub detections: Vec<BatchItem>,
}

impl TrainData {
    /// Dataset records for `scenes` scenes: one caption per scene and one
    /// detection of an active kind per scene.
    pub fn generate_records(seed: u64, scenes: usize, grid: usize, ablation: &AblationConfig) -> Vec<DatasetRecord> {
        let mut out = Vec::new();
        if ablation.sources.captions {
            let st = CaptionStream::new(seed, scenes, grid);
            out.extend(st.samples().iter().enumerate().map(|(i, c)| DatasetRecord::from_caption(seed, i as u64, c)));
        }
        let kinds = ablation.sources.detection_kinds();
        if !kinds.is_empty() {
            let st = DetectionStream::new(seed, scenes, grid, &kinds);
            out.extend(
                st.samples()
                    .iter()
                    .enumerate()
                    .map(|(i, d)| DatasetRecord::from_detection(seed, st.scene_index(i), d)),
            );
        }
        out
    }

    /// Keeps the records whose kind is an active source, in file order.
    pub fn from_records(records: &[DatasetRecord], ablation: &AblationConfig) -> Result<Self> {
        let kinds = ablation.sources.detection_kinds();
        let mut data = TrainData::default();
        for r in records {
            let item = BatchItem {
                grid: r.grid.clone(),
                text: r.text.clone(),
                bbox: r.bbox,
            };
            match r.kind {
                RecordKind::Caption if ablation.sources.captions => data.captions.push(item),
                RecordKind::Detection(k) if kinds.contains(&k) => {
                    if item.bbox.is_none() {
                        return Err(Error::parse("dataset record", format!("{} record without bbox", k.name())));
                    }
                    data.detections.push(item);
                }
                _ => {}
            }
        }
        if data.captions.is_empty() {
            return Err(Error::Configuration("no caption records for an active caption source".into()));
        }
        Ok(data)
    }
}

fn cyclic(items: &[BatchItem], index: usize, size: usize) -> Vec<BatchItem> {
    (0..size).map(|t| items[(index * size + t) % items.len()].clone()).collect()
}

pub struct TrainingRun {
    pub model: VlmModel,
    pub settings: TrainSettings,
    data: TrainData,
    sampler: InterleavedSampler,
    optimizer: Optimizer,
    step: usize,
}

impl TrainingRun {
    pub fn new(model: VlmModel, settings: TrainSettings, data: TrainData) -> Result<Self> {
        settings.validate()?;
        let pevl = settings.ablation.use_pevl_tokens;
        if pevl != model.config().position_bins.is_some() {
            return Err(Error::Configuration(format!(
                "position tokens are {} in the loss config but {} in the model",
                if pevl { "on" } else { "off" },
                if pevl { "off" } else { "on" }
            )));
        }
        let sampler = InterleavedSampler::new(settings.ablation.sources.has_detection(), data.detections.len())?;
        Ok(Self {
            model,
            optimizer: Optimizer::new(settings.optimizer, settings.lr, settings.clip_norm)?,
            settings,
            data,
            sampler,
            step: 0,
        })
    }

    /// Continues a run whose model has completed `step` steps. Only the
    /// stateless plain-gradient optimizer can resume exactly.
    pub fn resume(model: VlmModel, settings: TrainSettings, data: TrainData, step: usize) -> Result<Self> {
        if step > 0 && settings.optimizer != OptimizerKind::Sgd {
            return Err(Error::Configuration(format!(
                "cannot resume a {} run: optimizer state is not checkpointed",
                settings.optimizer
            )));
        }
        let mut run = Self::new(model, settings, data)?;
        run.step = step;
        Ok(run)
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.settings.steps
    }

    pub fn batch_at(&self, step: usize) -> Batch {
        let index = self.sampler.stream_index(step);
        match self.sampler.kind_at(step) {
            BatchKind::Caption => Batch {
                kind: BatchKind::Caption,
                items: cyclic(&self.data.captions, index, self.settings.caption_batch),
            },
            BatchKind::Detection => Batch {
                kind: BatchKind::Detection,
                items: cyclic(&self.data.detections, index, self.settings.detection_batch),
            },
        }
    }

    /// Runs one step; returns its index, batch kind and losses.
    pub fn advance(&mut self) -> Result<(usize, BatchKind, LossBundle)> {
        let step = self.step;
        let batch = self.batch_at(step);
        let seed = derive_seed(self.settings.seed, step as u64);
        let bundle = training_step(
            &mut self.model,
            &batch,
            &self.settings.ablation,
            &self.settings.objective,
            &mut self.optimizer,
            seed,
        )?;
        self.step += 1;
        Ok((step, batch.kind, bundle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::objectives::LossArm;
    use crate::synthdata::SourceSet;

    fn run(arm: LossArm, sources: SourceSet, steps: usize) -> TrainingRun {
        let ab = arm.config(sources);
        let mut settings = TrainSettings::new(ab);
        settings.steps = steps;
        settings.caption_batch = 3;
        settings.detection_batch = 3;
        let mut mc = ModelConfig::tiny();
        if ab.use_pevl_tokens {
            mc = mc.with_position_tokens(16);
        }
        let data = TrainData::from_records(&TrainData::generate_records(5, 12, 4, &ab), &ab).unwrap();
        TrainingRun::new(VlmModel::new(mc, 1).unwrap(), settings, data).unwrap()
    }

    #[test]
    fn schedule_and_determinism() {
        let mut a = run(LossArm::Full, SourceSet::all(), 6);
        let mut b = run(LossArm::Full, SourceSet::all(), 6);
        let mut kinds = Vec::new();
        while !a.is_done() {
            let (s, k, la) = a.advance().unwrap();
            let (_, _, lb) = b.advance().unwrap();
            assert_eq!(la, lb, "step {s}");
            assert!((la.total - la.active_sum()).abs() < 1e-9);
            kinds.push(k);
        }
        use BatchKind::{Caption as C, Detection as D};
        assert_eq!(kinds, vec![C, C, D, C, C, D]);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn captions_only_never_detects() {
        let r = run(LossArm::A, SourceSet::captions_only(), 9);
        assert!((0..9).all(|s| r.batch_at(s).kind == BatchKind::Caption));
    }

    #[test]
    fn resume_matches_continuous_run() {
        let mut a = run(LossArm::ABbox, SourceSet::all(), 4);
        for _ in 0..4 {
            a.advance().unwrap();
        }
        let mut b = run(LossArm::ABbox, SourceSet::all(), 4);
        b.advance().unwrap();
        b.advance().unwrap();
        let ck = b.model.to_checkpoint("h", 2);
        let data = b.data.clone();
        let mut c = TrainingRun::resume(VlmModel::from_checkpoint(&ck).unwrap(), b.settings, data, 2).unwrap();
        c.advance().unwrap();
        c.advance().unwrap();
        assert_eq!(a.model.params(), c.model.params());
    }

    #[test]
    fn rejects_mismatched_setup() {
        let ab = LossArm::Pevl.config(SourceSet::all());
        let data = TrainData::from_records(&TrainData::generate_records(5, 6, 4, &ab), &ab).unwrap();
        let model = VlmModel::new(ModelConfig::tiny(), 1).unwrap();
        assert!(TrainingRun::new(model, TrainSettings::new(ab), data).is_err());
        let ab = LossArm::A.config(SourceSet::captions_only());
        let mut s = TrainSettings::new(ab);
        s.caption_batch = 1;
        assert!(matches!(s.validate(), Err(Error::BatchSize { .. })));
    }
}
