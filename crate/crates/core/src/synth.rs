//! Procedural dataset of coloured shapes on textured backgrounds.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::taxonomy::{ClassId, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Bar,
}

pub const SHAPES: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Bar];

const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.05],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
];

/// Maximum number of distinct classes.
pub const MAX_CLASSES: usize = PALETTE.len();

/// Shape and colour of class `c` (1-based).
pub fn class_style(c: ClassId) -> (Shape, [f32; 3]) {
    let k = c as usize - 1;
    (SHAPES[k % SHAPES.len()], PALETTE[k])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub num_classes: usize,
    pub size: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 250,
            num_classes: 5,
            size: 32,
            max_objects: 3,
            seed: 0,
        }
    }
}

/// One rendered image with its dense mask and the classes it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask: Mask,
    pub classes: BTreeSet<ClassId>,
}

fn inside(shape: Shape, dy: f32, dx: f32, r: f32, angle: f32) -> bool {
    match shape {
        Shape::Disc => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        Shape::Triangle => {
            // Apex up; base at dy = r * 0.8.
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        Shape::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Bar => {
            let (s, c) = angle.sin_cos();
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            u.abs() <= r && v.abs() <= r * 0.3
        }
    }
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let base: f32 = rng.random_range(0.3..0.6);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let freq: f32 = rng.random_range(0.2..0.8);
    let phase: f32 = rng.random_range(0.0..6.28);
    let (dir_y, dir_x): (f32, f32) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let stripe = 0.06 * (freq * (dir_y * y as f32 + dir_x * x as f32) + phase).sin();
            let noise: f32 = rng.random_range(-0.04..0.04);
            for t in tint {
                data.push((base + t + stripe + noise).clamp(0.0, 1.0));
            }
        }
    }
    data
}

fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Option<SynthSample> {
    let size = cfg.size;
    let mut pixels = background(rng, size);
    let mut mask = vec![BACKGROUND; size * size];
    let count = rng.random_range(1..=cfg.max_objects);
    let mut drawn = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..=cfg.num_classes) as ClassId;
        let (shape, colour) = class_style(class);
        let r = rng.random_range(size as f32 * 0.16..size as f32 * 0.28);
        let cy = rng.random_range(r * 0.6..size as f32 - r * 0.6);
        let cx = rng.random_range(r * 0.6..size as f32 - r * 0.6);
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        for y in 0..size {
            for x in 0..size {
                if inside(shape, y as f32 + 0.5 - cy, x as f32 + 0.5 - cx, r, angle) {
                    let i = y * size + x;
                    mask[i] = class;
                    for c in 0..3 {
                        pixels[i * 3 + c] = (colour[c] + jitter[c]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        drawn.push(class);
    }
    // Every drawn class must stay visible after occlusion.
    let classes: BTreeSet<ClassId> = drawn.into_iter().collect();
    for &c in &classes {
        if mask.iter().filter(|&&v| v == c).count() < 6 {
            return None;
        }
    }
    Some(SynthSample {
        image: RgbImage::new(size, size, pixels).ok()?,
        mask: Mask::new(size, size, mask).ok()?,
        classes,
    })
}

/// Renders `cfg.n_images` samples; identical configs give identical output.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    if cfg.num_classes < 3 || cfg.num_classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "synthetic datasets support 3 to {MAX_CLASSES} classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.size < 8 || cfg.max_objects == 0 {
        return Err(Error::Config("image size must be at least 8 and max_objects positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_images);
    while out.len() < cfg.n_images {
        if let Some(s) = render(&mut rng, cfg) {
            out.push(s);
        }
    }
    Ok(out)
}
