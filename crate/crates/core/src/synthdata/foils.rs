use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, Shape};
use super::text::{NounPhrase, Relation, Statement};
use crate::error::{Error, Result};

/// Controlled phenomenon a foil probes. The evaluation protocol for each
/// subtask is fixed by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    /// "there is a circle" vs. an absent shape.
    Existence,
    /// Numeral off by one.
    Counting,
    /// Relation word flipped; scored as true/false statements.
    SpatialRelation,
    /// Same words, two noun phrases exchanged; forms an image/caption quad.
    RelationSwap,
    /// Nouns of two phrases exchanged.
    ObjectSwap,
    /// Colors of two phrases exchanged.
    AttributeSwap,
    /// Subject phrase replaced by an absent object (subject/verb/object probe analogue).
    SubjectSwap,
}

impl Subtask {
    pub const ALL: [Subtask; 7] = [
        Subtask::Existence,
        Subtask::Counting,
        Subtask::SpatialRelation,
        Subtask::RelationSwap,
        Subtask::ObjectSwap,
        Subtask::AttributeSwap,
        Subtask::SubjectSwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Existence => "existence",
            Subtask::Counting => "counting",
            Subtask::SpatialRelation => "spatial_relation",
            Subtask::RelationSwap => "relation_swap",
            Subtask::ObjectSwap => "object_swap",
            Subtask::AttributeSwap => "attribute_swap",
            Subtask::SubjectSwap => "subject_swap",
        }
    }

    /// Aspect that the foil changes.
    pub fn aspect(self) -> Aspect {
        match self {
            Subtask::Existence => Aspect::Noun,
            Subtask::Counting => Aspect::Count,
            Subtask::SpatialRelation => Aspect::Relation,
            Subtask::RelationSwap => Aspect::Order,
            Subtask::ObjectSwap => Aspect::ObjectSwap,
            Subtask::AttributeSwap => Aspect::AttributeSwap,
            Subtask::SubjectSwap => Aspect::Subject,
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownSubtask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aspect {
    Noun,
    Count,
    Relation,
    Order,
    ObjectSwap,
    AttributeSwap,
    Subject,
    /// Any change the classifier does not recognize as a single aspect.
    Other,
}

/// Positive pair and its minimally altered negative. Only relation-swap
/// foils change the scene: the negative scene holds the two objects at
/// exchanged positions, so both pairs are true and cross pairs are false.
#[derive(Clone, Debug, PartialEq)]
pub struct FoilPair {
    pub subtask: Subtask,
    pub positive_scene: Scene,
    pub positive_text: String,
    pub negative_scene: Scene,
    pub negative_text: String,
}

impl FoilPair {
    /// Structured difference of the two texts.
    pub fn aspects(&self) -> Result<Vec<Aspect>> {
        let a = Statement::parse(&self.positive_text)?;
        let b = Statement::parse(&self.negative_text)?;
        Ok(diff_statements(&a, &b))
    }
}

fn unsupported(subtask: Subtask, reason: &str) -> Error {
    Error::Capability {
        subtask: subtask.name().to_string(),
        reason: reason.to_string(),
    }
}

fn describe(phrases: Vec<NounPhrase>, relation: Relation) -> Statement {
    Statement::Describe {
        phrases,
        relation: Some(relation),
        articles: true,
    }
}

/// Rotation offset so that foil choices vary across scenes yet stay a pure
/// function of the scene.
fn rotation(scene: &Scene, n: usize) -> usize {
    (scene.seed % n as u64) as usize
}

pub fn make_foils(scene: &Scene, subtask: Subtask) -> Result<FoilPair> {
    let same_scene = |pos: Statement, neg: Statement| -> Result<FoilPair> {
        if !pos.holds(scene) || neg.holds(scene) {
            return Err(unsupported(subtask, "foil is not false in the scene"));
        }
        Ok(FoilPair {
            subtask,
            positive_scene: scene.clone(),
            positive_text: pos.to_string(),
            negative_scene: scene.clone(),
            negative_text: neg.to_string(),
        })
    };
    let objs = &scene.objects;
    let need_two = || {
        if objs.len() < 2 {
            Err(unsupported(subtask, "needs at least two objects"))
        } else {
            Ok(())
        }
    };
    match subtask {
        Subtask::Existence => {
            let absent: Vec<Shape> = Shape::ALL
                .into_iter()
                .filter(|s| scene.count_of(*s) == 0)
                .collect();
            if absent.is_empty() {
                return Err(unsupported(subtask, "every shape is present"));
            }
            let foil = absent[rotation(scene, absent.len())];
            same_scene(
                Statement::Exists {
                    shape: objs[0].shape,
                },
                Statement::Exists { shape: foil },
            )
        }
        Subtask::Counting => {
            need_two()?;
            let shape = objs[0].shape;
            let count = scene.count_of(shape);
            let wrong = if count < 4 { count + 1 } else { count - 1 };
            same_scene(
                Statement::Count { count, shape },
                Statement::Count {
                    count: wrong,
                    shape,
                },
            )
        }
        Subtask::SpatialRelation => {
            need_two()?;
            let rel = Relation::between(&objs[0].bbox, &objs[1].bbox);
            let phrases = vec![NounPhrase::of(&objs[0]), NounPhrase::of(&objs[1])];
            same_scene(
                describe(phrases.clone(), rel),
                describe(phrases, rel.flipped()),
            )
        }
        Subtask::RelationSwap => {
            need_two()?;
            let (p0, p1) = (NounPhrase::of(&objs[0]), NounPhrase::of(&objs[1]));
            if p0 == p1 {
                return Err(unsupported(subtask, "the two phrases are identical"));
            }
            let rel = Relation::between(&objs[0].bbox, &objs[1].bbox);
            let first = describe(vec![p0, p1], rel);
            let second = describe(vec![p1, p0], rel);
            let swapped = scene.with_swapped_positions(0, 1);
            let valid = first.holds(scene)
                && second.holds(&swapped)
                && !second.holds(scene)
                && !first.holds(&swapped);
            if !valid {
                return Err(unsupported(subtask, "swap does not separate the quad"));
            }
            Ok(FoilPair {
                subtask,
                positive_scene: scene.clone(),
                positive_text: first.to_string(),
                negative_scene: swapped,
                negative_text: second.to_string(),
            })
        }
        Subtask::ObjectSwap | Subtask::AttributeSwap => {
            need_two()?;
            let (a, b) = (&objs[0], &objs[1]);
            let rel = Relation::between(&a.bbox, &b.bbox);
            let pos = describe(vec![NounPhrase::of(a), NounPhrase::of(b)], rel);
            let neg = if subtask == Subtask::ObjectSwap {
                if a.shape == b.shape || a.color == b.color {
                    return Err(unsupported(subtask, "swap would only reorder the phrases"));
                }
                vec![
                    NounPhrase {
                        color: Some(a.color),
                        shape: b.shape,
                    },
                    NounPhrase {
                        color: Some(b.color),
                        shape: a.shape,
                    },
                ]
            } else {
                if a.shape == b.shape || a.color == b.color {
                    return Err(unsupported(subtask, "swap would only reorder the phrases"));
                }
                vec![
                    NounPhrase {
                        color: Some(b.color),
                        shape: a.shape,
                    },
                    NounPhrase {
                        color: Some(a.color),
                        shape: b.shape,
                    },
                ]
            };
            same_scene(pos, describe(neg, rel))
        }
        Subtask::SubjectSwap => {
            need_two()?;
            let (a, b) = (&objs[0], &objs[1]);
            let rel = Relation::between(&a.bbox, &b.bbox);
            let pos = describe(vec![NounPhrase::of(a), NounPhrase::of(b)], rel);
            let candidates: Vec<NounPhrase> = Color::ALL
                .into_iter()
                .flat_map(|c| {
                    Shape::ALL.into_iter().map(move |s| NounPhrase {
                        color: Some(c),
                        shape: s,
                    })
                })
                .filter(|p| !objs.iter().any(|o| p.matches(o)))
                .collect();
            if candidates.is_empty() {
                return Err(unsupported(subtask, "no absent subject available"));
            }
            let subject = candidates[rotation(scene, candidates.len())];
            same_scene(pos, describe(vec![subject, NounPhrase::of(b)], rel))
        }
    }
}

/// Classifies how `b` differs from `a`. An empty result means equal.
pub fn diff_statements(a: &Statement, b: &Statement) -> Vec<Aspect> {
    use Statement::*;
    match (a, b) {
        (Exists { shape: x }, Exists { shape: y }) => {
            if x == y {
                vec![]
            } else {
                vec![Aspect::Noun]
            }
        }
        (Count { count: c1, shape: s1 }, Count { count: c2, shape: s2 }) => {
            let mut out = vec![];
            if c1 != c2 {
                out.push(Aspect::Count);
            }
            if s1 != s2 {
                out.push(Aspect::Noun);
            }
            out
        }
        (
            Describe {
                phrases: p,
                relation: r1,
                articles: a1,
            },
            Describe {
                phrases: q,
                relation: r2,
                articles: a2,
            },
        ) => {
            if p.len() != q.len() || a1 != a2 {
                return vec![Aspect::Other];
            }
            let mut out = vec![];
            if r1 != r2 {
                out.push(Aspect::Relation);
            }
            let changed: Vec<usize> = (0..p.len()).filter(|&i| p[i] != q[i]).collect();
            match changed.as_slice() {
                [] => {}
                [0] => out.push(Aspect::Subject),
                [i, j] if p[*i] == q[*j] && p[*j] == q[*i] => out.push(Aspect::Order),
                [i, j] => {
                    let (pi, pj, qi, qj) = (p[*i], p[*j], q[*i], q[*j]);
                    if pi.shape == qi.shape && pj.shape == qj.shape
                        && pi.color == qj.color && pj.color == qi.color
                    {
                        out.push(Aspect::AttributeSwap);
                    } else if pi.color == qi.color && pj.color == qj.color
                        && pi.shape == qj.shape && pj.shape == qi.shape
                    {
                        out.push(Aspect::ObjectSwap);
                    } else {
                        out.push(Aspect::Other);
                    }
                }
                _ => out.push(Aspect::Other),
            }
            out
        }
        _ => vec![Aspect::Other],
    }
}
