use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::group::{ActionKind, GroupAction};
use crate::rng::substream;

pub const SIDE: usize = 16;
pub const NUM_CLASSES: usize = 8;
const BOX: usize = 12;

pub const GLYPH_NAMES: [&str; NUM_CLASSES] = ["flag", "ell", "hook", "eff", "pee", "jay", "zed", "aitch"];

/// Filled rectangles `(r0, c0, r1, c1)`, inclusive, on a 12×12 box. No glyph
/// is a rotation of another, and
/// only `zed` is symmetric under any rotation or mirror.
const GLYPHS: [&[(usize, usize, usize, usize)]; NUM_CLASSES] = [
    &[(0, 2, 11, 3), (0, 4, 5, 10)],
    &[(0, 1, 11, 2), (10, 1, 11, 10)],
    &[(3, 2, 11, 3), (3, 4, 4, 10), (5, 9, 7, 10)],
    &[(0, 1, 11, 2), (0, 1, 1, 10), (5, 1, 6, 7)],
    &[(0, 1, 11, 2), (0, 1, 1, 9), (0, 8, 6, 9), (5, 1, 6, 9)],
    &[(0, 8, 11, 9), (10, 1, 11, 9), (7, 1, 11, 2)],
    &[(0, 1, 1, 10), (2, 7, 4, 9), (5, 4, 7, 6), (8, 1, 9, 3), (10, 1, 11, 10)],
    &[(0, 1, 11, 2), (5, 1, 6, 9), (5, 8, 11, 9)],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSplit {
    Train,
    TestUpright,
    TestRot90,
}

impl ShapeSplit {
    pub fn name(self) -> &'static str {
        match self {
            ShapeSplit::Train => "train",
            ShapeSplit::TestUpright => "test_upright",
            ShapeSplit::TestRot90 => "test_rot90",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDataset {
    pub split: ShapeSplit,
    /// `[N, 1, 16, 16]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Rotation applied to each example (all zero except for `test_rot90`).
    pub rotations: Vec<usize>,
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` as `[1, 16, 16]`.
    pub fn image(&self, i: usize) -> Tensor {
        let w = SIDE * SIDE;
        Tensor::new(vec![1, SIDE, SIDE], self.images.data()[i * w..(i + 1) * w].to_vec()).expect("image shape")
    }

    /// Images `range` stacked as `[k, 1, 16, 16]`.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Tensor {
        let w = SIDE * SIDE;
        Tensor::new(vec![range.len(), 1, SIDE, SIDE], self.images.data()[range.start * w..range.end * w].to_vec())
            .expect("batch shape")
    }
}

/// Upright rendering of glyph `class` with the box's top-left corner at
/// `(top, left)`, plus uniform noise of amplitude `noise` drawn from `rng`.
pub fn render_glyph(class: usize, top: usize, left: usize, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    assert!(class < NUM_CLASSES && top + BOX <= SIDE && left + BOX <= SIDE);
    let mut img = vec![0.0; SIDE * SIDE];
    for &(r0, c0, r1, c1) in GLYPHS[class] {
        for r in r0..=r1 {
            for c in c0..=c1 {
                img[(top + r) * SIDE + left + c] = 1.0;
            }
        }
    }
    let ink = rng.gen_range(0.8..=1.0);
    for v in &mut img {
        let n: f64 = rng.gen_range(0.0..=noise);
        *v = (*v * ink + n).clamp(0.0, 1.0);
    }
    img
}

fn upright(seed: u64, stream: &str, i: usize) -> Vec<f64> {
    let mut rng = substream(seed, &format!("shapes.{stream}.{i}"));
    let centre = (SIDE - BOX) / 2;
    let top = centre + rng.gen_range(0..=2) - 1;
    let left = centre + rng.gen_range(0..=2) - 1;
    render_glyph(i % NUM_CLASSES, top, left, 0.15, &mut rng)
}

/// `n` glyph images with round-robin labels. The test splits share their
/// renderings; `test_rot90` rotates each one by a random element of Z4.
pub fn gen_shapes(seed: u64, n: usize, split: ShapeSplit) -> ShapeDataset {
    assert!(n >= 1, "n must be positive");
    let stream = match split {
        ShapeSplit::Train => "train",
        _ => "test",
    };
    let rot = GroupAction::cyclic(4, ActionKind::Rot90Image).expect("c4");
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut rotations = Vec::with_capacity(n);
    for i in 0..n {
        let img = upright(seed, stream, i);
        let k = match split {
            ShapeSplit::TestRot90 => substream(seed, &format!("shapes.rot.{i}")).gen_range(0..4),
            _ => 0,
        };
        let t = Tensor::new(vec![1, SIDE, SIDE], img).expect("image shape");
        data.extend_from_slice(rot.act_tensor(k, &t).expect("square image").data());
        rotations.push(k);
    }
    ShapeDataset {
        split,
        images: Tensor::new(vec![n, 1, SIDE, SIDE], data).expect("dataset shape"),
        labels: (0..n).map(|i| i % NUM_CLASSES).collect(),
        rotations,
    }
}
