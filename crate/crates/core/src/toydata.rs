//! Procedural scenes of colored shapes on muted backgrounds.
//!
//! Tags are the shape kinds and the colors present. The shape/color split makes
//! degradation measurable: heavy blur merges rings into disks and rounds
//! corners, while color survives better.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::tags::{TagSet, TagVocabulary};

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.85, 0.12, 0.10]),
    ("green", [0.12, 0.72, 0.18]),
    ("blue", [0.12, 0.22, 0.88]),
    ("yellow", [0.92, 0.85, 0.12]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
        }
    }

    /// Whether the point `(dx, dy)`, in units of the shape radius, lies inside.
    fn covers(self, dx: f32, dy: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= 1.0,
            ShapeKind::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            ShapeKind::Triangle => {
                // Apex up, base at dy = 0.8.
                dy <= 0.8 && dy >= -1.0 && dx.abs() <= (dy + 1.0) * 0.55
            }
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

/// Colors first, then shapes.
pub fn toy_vocabulary() -> TagVocabulary {
    let names = COLORS
        .iter()
        .map(|(n, _)| n.to_string())
        .chain(ShapeKind::ALL.iter().map(|s| s.name().to_string()))
        .collect();
    TagVocabulary::new(names).expect("static vocabulary is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius as a fraction of the image side.
    pub radius: [f32; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 256,
            min_shapes: 1,
            max_shapes: 2,
            radius: [0.16, 0.3],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            bail!(Config, "scene size {} is below 16", self.size);
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            bail!(Config, "shape count range [{}, {}] is invalid", self.min_shapes, self.max_shapes);
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1] && self.radius[1] < 0.5) {
            bail!(Config, "radius range {:?} is invalid", self.radius);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: usize,
    pub center: [f32; 2],
    pub radius: f32,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageTensor,
    pub tags: TagSet,
    pub shapes: Vec<PlacedShape>,
}

/// Renders one scene; pure in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.size;
    let sz = n as f32;

    // Muted background: gray with a gentle linear gradient.
    let base: f32 = rng.random_range(0.3..0.65);
    let tint: [f32; 3] = [
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
    ];
    let (gx, gy): (f32, f32) = (rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12));

    let count = rng.random_range(config.min_shapes..=config.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let color = rng.random_range(0..COLORS.len());
        let radius = rng.random_range(config.radius[0]..=config.radius[1]) * sz;
        let margin = radius / sz;
        let center = [
            rng.random_range(margin..=1.0 - margin) * sz,
            rng.random_range(margin..=1.0 - margin) * sz,
        ];
        shapes.push(PlacedShape { kind, color, center, radius });
    }

    // 2x2 supersampling for soft edges.
    const SUB: [f32; 2] = [0.25, 0.75];
    let image = ImageTensor::from_fn(n, n, 3, |y, x, c| {
        let u = x as f32 / sz - 0.5;
        let v = y as f32 / sz - 0.5;
        let bg = (base + tint[c] + gx * u + gy * v).clamp(0.0, 1.0);
        let mut acc = 0.0;
        for sy in SUB {
            for sx in SUB {
                let (px, py) = (x as f32 + sx, y as f32 + sy);
                let mut value = bg;
                for s in &shapes {
                    let dx = (px - s.center[0]) / s.radius;
                    let dy = (py - s.center[1]) / s.radius;
                    if s.kind.covers(dx, dy) {
                        value = COLORS[s.color].1[c];
                    }
                }
                acc += value;
            }
        }
        acc / 4.0
    })?;

    let ncolors = COLORS.len();
    let tags = TagSet::from_indices(
        shapes
            .iter()
            .flat_map(|s| [s.color, ncolors + ShapeKind::ALL.iter().position(|k| *k == s.kind).unwrap()]),
    );
    Ok(Scene { image, tags, shapes })
}
