//! Template grammar: rendering, parsing and truth evaluation of statements
//! about a [`Scene`].

use std::fmt;

use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, SceneObject, Shape};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUMERALS: [&str; 4] = ["one", "two", "three", "four"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    /// Relation of `a` with respect to `b`, along the axis of larger
    /// center displacement.
    pub fn between(a: &BBox, b: &BBox) -> Relation {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        if (ax - bx).abs() >= (ay - by).abs() {
            if ax < bx {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if ay < by {
            Relation::Above
        } else {
            Relation::Below
        }
    }

    pub fn flipped(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounPhrase {
    pub color: Option<Color>,
    pub shape: Shape,
}

impl NounPhrase {
    pub fn of(o: &SceneObject) -> Self {
        Self {
            color: Some(o.color),
            shape: o.shape,
        }
    }

    pub fn matches(&self, o: &SceneObject) -> bool {
        self.shape == o.shape && self.color.is_none_or(|c| c == o.color)
    }
}

/// Structured form of every sentence the generator produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statement {
    /// "there is a circle"
    Exists { shape: Shape },
    /// "two circles", "one square"
    Count { count: usize, shape: Shape },
    /// "a red circle left of a blue square and a green triangle"; the
    /// relation, when present, links the first two phrases.
    Describe {
        phrases: Vec<NounPhrase>,
        relation: Option<Relation>,
        articles: bool,
    },
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words().join(" "))
    }
}

impl Statement {
    pub fn words(&self) -> Vec<&'static str> {
        match self {
            Statement::Exists { shape } => vec!["there", "is", "a", shape.noun()],
            Statement::Count { count, shape } => {
                let noun = if *count == 1 { shape.noun() } else { shape.plural() };
                vec![NUMERALS[count - 1], noun]
            }
            Statement::Describe {
                phrases,
                relation,
                articles,
            } => {
                let mut w = Vec::new();
                let phrase = |w: &mut Vec<&'static str>, p: &NounPhrase| {
                    if *articles {
                        w.push("a");
                    }
                    if let Some(c) = p.color {
                        w.push(c.word());
                    }
                    w.push(p.shape.noun());
                };
                for (i, p) in phrases.iter().enumerate() {
                    if i == 1 {
                        match relation {
                            Some(r) => w.extend_from_slice(r.words()),
                            None => w.push("and"),
                        }
                    } else if i > 1 {
                        w.push("and");
                    }
                    phrase(&mut w, p);
                }
                w
            }
        }
    }

    pub fn parse(text: &str) -> Result<Statement> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::parse("statement", text.to_string());
        match words.as_slice() {
            ["there", "is", "a", noun] => Ok(Statement::Exists {
                shape: shape_of(noun).ok_or_else(bad)?,
            }),
            [num, noun] if NUMERALS.contains(num) => {
                let count = NUMERALS.iter().position(|n| n == num).unwrap() + 1;
                let shape = if count == 1 {
                    shape_of(noun)
                } else {
                    Shape::ALL.into_iter().find(|s| s.plural() == *noun)
                };
                Ok(Statement::Count {
                    count,
                    shape: shape.ok_or_else(bad)?,
                })
            }
            _ => parse_description(&words).ok_or_else(bad),
        }
    }

    /// Truth of the statement in `scene`. Descriptions need an injective
    /// assignment of phrases to matching objects that also satisfies the
    /// relation.
    pub fn holds(&self, scene: &Scene) -> bool {
        match self {
            Statement::Exists { shape } => scene.count_of(*shape) > 0,
            Statement::Count { count, shape } => scene.count_of(*shape) == *count,
            Statement::Describe {
                phrases, relation, ..
            } => {
                let mut used = vec![false; scene.objects.len()];
                let mut chosen = Vec::with_capacity(phrases.len());
                assign(scene, phrases, *relation, &mut used, &mut chosen)
            }
        }
    }
}

fn assign(
    scene: &Scene,
    phrases: &[NounPhrase],
    relation: Option<Relation>,
    used: &mut [bool],
    chosen: &mut Vec<usize>,
) -> bool {
    if chosen.len() == phrases.len() {
        return match (relation, chosen.as_slice()) {
            (Some(r), [a, b, ..]) => {
                Relation::between(&scene.objects[*a].bbox, &scene.objects[*b].bbox) == r
            }
            _ => true,
        };
    }
    let p = &phrases[chosen.len()];
    for i in 0..scene.objects.len() {
        if used[i] || !p.matches(&scene.objects[i]) {
            continue;
        }
        used[i] = true;
        chosen.push(i);
        let ok = assign(scene, phrases, relation, used, chosen);
        chosen.pop();
        used[i] = false;
        if ok {
            return true;
        }
    }
    false
}

fn shape_of(noun: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.noun() == noun)
}

fn color_of(word: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.word() == word)
}

fn parse_description(words: &[&str]) -> Option<Statement> {
    let mut phrases = Vec::new();
    let mut relation = None;
    let articles = words.first() == Some(&"a");
    let mut i = 0;
    loop {
        if articles {
            if words.get(i) != Some(&"a") {
                return None;
            }
            i += 1;
        }
        let color = words.get(i).and_then(|w| color_of(w));
        if color.is_some() {
            i += 1;
        }
        let shape = shape_of(words.get(i)?)?;
        i += 1;
        phrases.push(NounPhrase { color, shape });
        if i == words.len() {
            break;
        }
        let rest = &words[i..];
        let rel = [
            Relation::LeftOf,
            Relation::RightOf,
            Relation::Above,
            Relation::Below,
        ]
        .into_iter()
        .find(|r| rest.starts_with(r.words()));
        match rel {
            Some(r) if phrases.len() == 1 => {
                relation = Some(r);
                i += r.words().len();
            }
            _ if rest[0] == "and" => i += 1,
            _ => return None,
        }
    }
    Some(Statement::Describe {
        phrases,
        relation,
        articles,
    })
}
