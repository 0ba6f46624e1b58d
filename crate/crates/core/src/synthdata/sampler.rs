use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{derive_seed, generate_scene_on};
use super::{caption_of, detections_of, CaptionSample, DetectionKind, DetectionSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchKind {
    Caption,
    Detection,
}

impl BatchKind {
    pub fn name(self) -> &'static str {
        match self {
            BatchKind::Caption => "caption",
            BatchKind::Detection => "detection",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectionSource {
    ObjectLabels,
    AttributeLabels,
    RegionDescriptions,
}

/// Active training data sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceSet {
    pub captions: bool,
    pub object_labels: bool,
    pub attribute_labels: bool,
    pub region_descriptions: bool,
}

impl SourceSet {
    pub const NAMES: [&'static str; 4] = [
        "captions",
        "object_labels",
        "attribute_labels",
        "region_descriptions",
    ];

    pub fn all() -> Self {
        Self {
            captions: true,
            object_labels: true,
            attribute_labels: true,
            region_descriptions: true,
        }
    }

    pub fn captions_only() -> Self {
        Self {
            captions: true,
            object_labels: false,
            attribute_labels: false,
            region_descriptions: false,
        }
    }

    pub fn with(mut self, kind: DetectionKind) -> Self {
        match kind {
            DetectionKind::ObjectLabel => self.object_labels = true,
            DetectionKind::AttributeLabel => self.attribute_labels = true,
            DetectionKind::RegionDescription => self.region_descriptions = true,
        }
        self
    }

    pub fn has_detection(&self) -> bool {
        self.object_labels || self.attribute_labels || self.region_descriptions
    }

    pub fn detection_kinds(&self) -> Vec<DetectionKind> {
        DetectionKind::ALL
            .into_iter()
            .filter(|k| match k {
                DetectionKind::ObjectLabel => self.object_labels,
                DetectionKind::AttributeLabel => self.attribute_labels,
                DetectionKind::RegionDescription => self.region_descriptions,
            })
            .collect()
    }

    fn flags(&self) -> [bool; 4] {
        [
            self.captions,
            self.object_labels,
            self.attribute_labels,
            self.region_descriptions,
        ]
    }
}

impl fmt::Display for SourceSet {
    /// `+`-joined source names, e.g. `captions+region_descriptions`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for SourceSet {
    type Err = Error;

    /// Accepts `all` or a `+`-joined list of source names.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::all());
        }
        let mut set = SourceSet {
            captions: false,
            object_labels: false,
            attribute_labels: false,
            region_descriptions: false,
        };
        for part in s.split('+').map(str::trim) {
            match part {
                "captions" => set.captions = true,
                "object_labels" => set.object_labels = true,
                "attribute_labels" => set.attribute_labels = true,
                "region_descriptions" => set.region_descriptions = true,
                other => {
                    return Err(Error::Configuration(format!("unknown data source {other:?}")))
                }
            }
        }
        Ok(set)
    }
}

/// Deterministic caption/detection schedule: `C, C, D` repeating when
/// detection data is active, otherwise captions only.
#[derive(Clone, Copy, Debug)]
pub struct InterleavedSampler {
    detection: bool,
}

impl InterleavedSampler {
    pub fn new(detection_active: bool, detection_stream_len: usize) -> Result<Self> {
        if detection_active && detection_stream_len == 0 {
            return Err(Error::Configuration(
                "detection sources are active but the detection stream is empty".into(),
            ));
        }
        Ok(Self {
            detection: detection_active,
        })
    }

    pub fn kind_at(&self, step: usize) -> BatchKind {
        if self.detection && step % 3 == 2 {
            BatchKind::Detection
        } else {
            BatchKind::Caption
        }
    }

    /// Index of `step` within the stream of its own kind.
    pub fn stream_index(&self, step: usize) -> usize {
        if !self.detection {
            return step;
        }
        match self.kind_at(step) {
            BatchKind::Caption => step / 3 * 2 + step % 3,
            BatchKind::Detection => step / 3,
        }
    }

    pub fn schedule(&self, steps: usize) -> Vec<BatchKind> {
        (0..steps).map(|s| self.kind_at(s)).collect()
    }
}

fn cyclic_batch<T>(items: &[T], batch: usize, size: usize) -> Vec<&T> {
    (0..size)
        .map(|t| &items[(batch * size + t) % items.len()])
        .collect()
}

/// One caption per scene; scene `i` is generated from `derive_seed(seed, i)`.
#[derive(Clone, Debug)]
pub struct CaptionStream {
    pub seed: u64,
    samples: Vec<CaptionSample>,
}

impl CaptionStream {
    pub fn new(seed: u64, scenes: usize, grid: usize) -> Self {
        let samples = (0..scenes as u64)
            .map(|i| caption_of(&generate_scene_on(derive_seed(seed, i), grid)))
            .collect();
        Self { seed, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[CaptionSample] {
        &self.samples
    }

    pub fn batch(&self, index: usize, size: usize) -> Vec<&CaptionSample> {
        cyclic_batch(&self.samples, index, size)
    }
}

/// One detection sample of an active kind per scene, so consecutive
/// samples never share an image. Scenes without an active kind (a single
/// object when only region descriptions are active) are skipped.
#[derive(Clone, Debug)]
pub struct DetectionStream {
    pub seed: u64,
    samples: Vec<DetectionSample>,
    /// Scene index each sample was drawn from.
    scene_index: Vec<u64>,
}

impl DetectionStream {
    pub fn new(seed: u64, scenes: usize, grid: usize, kinds: &[DetectionKind]) -> Self {
        let mut samples = Vec::new();
        let mut scene_index = Vec::new();
        for i in 0..scenes as u64 {
            let scene_seed = derive_seed(seed, i);
            let scene = generate_scene_on(scene_seed, grid);
            let mut dets: Vec<DetectionSample> = detections_of(&scene)
                .into_iter()
                .filter(|d| kinds.contains(&d.kind))
                .collect();
            if dets.is_empty() {
                continue;
            }
            let pick = (derive_seed(scene_seed, 1) % dets.len() as u64) as usize;
            samples.push(dets.swap_remove(pick));
            scene_index.push(i);
        }
        Self {
            seed,
            samples,
            scene_index,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DetectionSample] {
        &self.samples
    }

    pub fn scene_index(&self, sample: usize) -> u64 {
        self.scene_index[sample]
    }

    pub fn batch(&self, index: usize, size: usize) -> Vec<&DetectionSample> {
        cyclic_batch(&self.samples, index, size)
    }
}
