//! Procedural grounded scenes: patch grids of colored shapes with captions,
//! detection annotations, foils, and the caption/detection batch schedule.

mod dataset;
mod foils;
mod sampler;
mod scene;
mod text;

pub use dataset::{
    parse_record, read_dataset, render_record, verify_dataset, write_dataset, DatasetRecord,
    RecordKind,
};
pub use foils::{diff_statements, make_foils, Aspect, FoilPair, Subtask};
pub use sampler::{
    BatchKind, CaptionStream, DetectionSource, DetectionStream, InterleavedSampler, SourceSet,
};
pub use scene::{
    derive_seed, generate_scene, generate_scene_on, Color, PatchGrid, Scene, SceneObject, Shape,
    DEFAULT_GRID, MAX_OBJECTS, PATCH_CHANNELS,
};
pub use text::{NounPhrase, Relation, Statement, NUMERALS};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    pub scene: Scene,
    pub caption: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectionKind {
    ObjectLabel,
    AttributeLabel,
    RegionDescription,
}

impl DetectionKind {
    pub const ALL: [DetectionKind; 3] = [
        DetectionKind::ObjectLabel,
        DetectionKind::AttributeLabel,
        DetectionKind::RegionDescription,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectionKind::ObjectLabel => "object_label",
            DetectionKind::AttributeLabel => "attribute_label",
            DetectionKind::RegionDescription => "region_description",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub scene: Scene,
    pub kind: DetectionKind,
    pub text: String,
    pub bbox: BBox,
    /// Index of the grounded object in `scene.objects`.
    pub object: usize,
}

fn describe(scene: &Scene, articles: bool) -> Statement {
    let phrases = scene.objects.iter().map(NounPhrase::of).collect();
    let relation = match scene.objects.as_slice() {
        [a, b, ..] => Some(Relation::between(&a.bbox, &b.bbox)),
        _ => None,
    };
    Statement::Describe {
        phrases,
        relation,
        articles,
    }
}

/// One sentence naming every object once, with the relation between the
/// first two objects.
pub fn caption_of(scene: &Scene) -> CaptionSample {
    CaptionSample {
        scene: scene.clone(),
        caption: describe(scene, true).to_string(),
    }
}

/// Object and attribute labels for every object, plus one region
/// description per consecutive object pair, grounded on the first object
/// of the pair.
pub fn detections_of(scene: &Scene) -> Vec<DetectionSample> {
    let mut out = Vec::new();
    let sample = |kind, text: String, object: usize| DetectionSample {
        scene: scene.clone(),
        kind,
        text,
        bbox: scene.objects[object].bbox,
        object,
    };
    for (i, o) in scene.objects.iter().enumerate() {
        out.push(sample(DetectionKind::ObjectLabel, o.shape.noun().to_string(), i));
        out.push(sample(
            DetectionKind::AttributeLabel,
            format!("{} {}", o.color, o.shape),
            i,
        ));
    }
    for i in 0..scene.objects.len().saturating_sub(1) {
        let (a, b) = (&scene.objects[i], &scene.objects[i + 1]);
        let text = Statement::Describe {
            phrases: vec![NounPhrase::of(a), NounPhrase::of(b)],
            relation: Some(Relation::between(&a.bbox, &b.bbox)),
            articles: false,
        }
        .to_string();
        out.push(sample(DetectionKind::RegionDescription, text, i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(n: usize) -> Scene {
        (0..1000)
            .map(generate_scene)
            .find(|s| s.objects.len() == n)
            .unwrap()
    }

    #[test]
    fn single_object_templates() {
        let mut s = scene_with(1);
        s.objects[0].color = Color::Red;
        s.objects[0].shape = Shape::Circle;
        assert_eq!(caption_of(&s).caption, "a red circle");
        let d = detections_of(&s);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].text, "circle");
        assert_eq!(d[0].kind, DetectionKind::ObjectLabel);
        assert_eq!(d[1].text, "red circle");
    }

    #[test]
    fn captions_mention_every_object_once() {
        for seed in 0..500 {
            let s = generate_scene(seed);
            let c = caption_of(&s);
            let parsed = Statement::parse(&c.caption).unwrap();
            match parsed {
                Statement::Describe { phrases, .. } => {
                    assert_eq!(phrases.len(), s.objects.len());
                    for (p, o) in phrases.iter().zip(&s.objects) {
                        assert_eq!(*p, NounPhrase::of(o));
                    }
                }
                other => panic!("unexpected {other:?}"),
            }
            assert!(Statement::parse(&c.caption).unwrap().holds(&s));
        }
    }

    #[test]
    fn region_descriptions_carry_relations_and_boxes() {
        let s = scene_with(2);
        let d = detections_of(&s);
        let rd: Vec<_> = d
            .iter()
            .filter(|x| x.kind == DetectionKind::RegionDescription)
            .collect();
        assert_eq!(rd.len(), 1);
        let words = ["left", "right", "above", "below"];
        assert!(words.iter().any(|w| rd[0].text.split(' ').any(|t| t == *w)));
        for x in &d {
            assert_eq!(x.bbox, s.objects[x.object].bbox);
            assert!(Statement::parse(&x.text).unwrap().holds(&s));
        }
    }
}
