use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub const DEFAULT_GRID: usize = 4;
/// Four color channels, three shape channels, one occupancy channel.
pub const PATCH_CHANNELS: usize = 8;
pub const MAX_OBJECTS: usize = 4;

const MIN_SIZE: f64 = 0.15;
const MAX_SIZE: f64 = 0.35;
const NOISE_STD: f64 = 0.02;
const MIN_SEPARATION: f64 = 0.2;
const MAX_OVERLAP: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn noun(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.noun())
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BBox,
    /// Position among the objects of the same shape, in scene order.
    pub count_index: usize,
}

/// `side × side` patches of `PATCH_CHANNELS` features, row-major by patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub side: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn patches(&self) -> usize {
        self.side * self.side
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.data[p * PATCH_CHANNELS..(p + 1) * PATCH_CHANNELS]
    }

    /// Rectangle covered by patch `p` (row-major, row = y).
    pub fn cell(side: usize, p: usize) -> BBox {
        let (r, c) = (p / side, p % side);
        let s = side as f64;
        BBox {
            x1: c as f64 / s,
            y1: r as f64 / s,
            x2: (c + 1) as f64 / s,
            y2: (r + 1) as f64 / s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub grid: PatchGrid,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn count_of(&self, shape: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }

    /// Same objects with the boxes of objects `a` and `b` exchanged,
    /// re-rendered with the same noise.
    pub fn with_swapped_positions(&self, a: usize, b: usize) -> Scene {
        let mut objects = self.objects.clone();
        let tmp = objects[a].bbox;
        objects[a].bbox = objects[b].bbox;
        objects[b].bbox = tmp;
        Scene {
            seed: self.seed,
            grid: render(&objects, self.grid.side, self.seed),
            objects,
        }
    }
}

/// Deterministic 64-bit mix of a base seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64) -> Scene {
    generate_scene_on(seed, DEFAULT_GRID)
}

/// Draws 1–4 objects with rejection-sampled placement: consecutive objects
/// are separated clearly along one axis, overlaps stay small and no two
/// boxes coincide.
pub fn generate_scene_on(seed: u64, side: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=MAX_OBJECTS);
    let objects = 'scene: loop {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            let mut placed = None;
            for _ in 0..200 {
                let w = rng.random_range(MIN_SIZE..MAX_SIZE);
                let h = rng.random_range(MIN_SIZE..MAX_SIZE);
                let x1 = rng.random_range(0.0..1.0 - w);
                let y1 = rng.random_range(0.0..1.0 - h);
                let bbox = BBox {
                    x1,
                    y1,
                    x2: x1 + w,
                    y2: y1 + h,
                };
                if acceptable(&objects, &bbox) {
                    placed = Some(bbox);
                    break;
                }
            }
            let Some(bbox) = placed else {
                continue 'scene;
            };
            let count_index = objects.iter().filter(|o| o.shape == shape).count();
            objects.push(SceneObject {
                shape,
                color,
                bbox,
                count_index,
            });
        }
        break objects;
    };
    Scene {
        seed,
        grid: render(&objects, side, seed),
        objects,
    }
}

fn acceptable(existing: &[SceneObject], bbox: &BBox) -> bool {
    for o in existing {
        if o.bbox == *bbox {
            return false;
        }
        let inter = o.bbox.intersection_area(bbox);
        if inter > MAX_OVERLAP * o.bbox.area().min(bbox.area()) {
            return false;
        }
    }
    if let Some(prev) = existing.last() {
        let (px, py) = prev.bbox.center();
        let (cx, cy) = bbox.center();
        let (dx, dy) = ((cx - px).abs(), (cy - py).abs());
        let (major, minor) = if dx >= dy { (dx, dy) } else { (dy, dx) };
        if major < MIN_SEPARATION || major < 2.0 * minor {
            return false;
        }
    }
    true
}

fn render(objects: &[SceneObject], side: usize, seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = vec![0.0; side * side * PATCH_CHANNELS];
    for p in 0..side * side {
        let cell = PatchGrid::cell(side, p);
        let f = &mut data[p * PATCH_CHANNELS..(p + 1) * PATCH_CHANNELS];
        for o in objects {
            let cover = o.bbox.intersection_area(&cell) / cell.area();
            f[o.color.index()] += cover;
            f[4 + o.shape.index()] += cover;
            f[7] += cover;
        }
        for v in f.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    PatchGrid { side, data }
}
