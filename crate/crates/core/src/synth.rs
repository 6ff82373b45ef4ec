//! Moving-shapes toy dataset.
//!
//! Single-channel frames over a smooth static background (class 0). Each
//! clip carries rectangles that translate by at most one pixel per frame
//! and bounce off the borders, optionally growing or shrinking as they go
//! so that block motion cannot follow them exactly. Class 1 rectangles hold a one-pixel
//! checkerboard of 0 and 1; class 2 rectangles are flat 0.5. Both have
//! mean 0.5, so a 2× downsample makes them indistinguishable: only the
//! full-resolution frame tells them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Per-frame probability that each side of a shape grows or shrinks by
    /// one pixel, within `min_side..=max_side`.
    #[serde(default)]
    pub deform: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 48,
            frames: 16,
            objects: 2,
            min_side: 8,
            max_side: 16,
            deform: 0.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u32,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    vx: i64,
    vy: i64,
}

impl Shape {
    fn step(&mut self, width: i64, height: i64) {
        if self.x + self.vx < 0 || self.x + self.w + self.vx > width {
            self.vx = -self.vx;
        }
        if self.y + self.vy < 0 || self.y + self.h + self.vy > height {
            self.vy = -self.vy;
        }
        self.x += self.vx;
        self.y += self.vy;
    }

    fn deform(&mut self, config: &SynthConfig, width: i64, height: i64, rng: &mut ChaCha8Rng) {
        let (lo, hi) = (config.min_side as i64, config.max_side as i64);
        if rng.gen_bool(config.deform) {
            let w = (self.w + if rng.gen_bool(0.5) { 1 } else { -1 }).clamp(lo, hi.min(width));
            self.x = self.x.min(width - w);
            self.w = w;
        }
        if rng.gen_bool(config.deform) {
            let h = (self.h + if rng.gen_bool(0.5) { 1 } else { -1 }).clamp(lo, hi.min(height));
            self.y = self.y.min(height - h);
            self.h = h;
        }
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        (self.x..self.x + self.w).contains(&x) && (self.y..self.y + self.h).contains(&y)
    }

    /// Intensity at `(x, y)`; the texture moves with the shape.
    fn value(&self, x: i64, y: i64) -> f64 {
        match self.class {
            1 => ((x - self.x + y - self.y).rem_euclid(2)) as f64,
            _ => 0.5,
        }
    }
}

/// Clip number `index` of the dataset defined by `config`.
pub fn generate_clip(config: &SynthConfig, index: u64) -> Result<SynthClip> {
    let (h, w) = (config.height as i64, config.width as i64);
    if config.min_side == 0 || config.min_side > config.max_side || config.max_side as i64 > h.min(w) {
        return Err(Error::invalid("object sides must satisfy 1 ≤ min_side ≤ max_side ≤ frame side"));
    }
    if !(0.0..=1.0).contains(&config.deform) {
        return Err(Error::invalid("deform must be a probability"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    let (gx, gy) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let base = rng.gen_range(0.1..0.2);
    let background = |x: i64, y: i64| base + 0.15 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);

    let mut shapes: Vec<Shape> = (0..config.objects)
        .map(|i| {
            let sw = rng.gen_range(config.min_side..=config.max_side) as i64;
            let sh = rng.gen_range(config.min_side..=config.max_side) as i64;
            let (vx, vy) = loop {
                let v = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
                if v != (0, 0) {
                    break v;
                }
            };
            Shape {
                class: if config.objects >= 2 { (i % 2) as u32 + 1 } else { rng.gen_range(1..=2) },
                x: rng.gen_range(0..=w - sw),
                y: rng.gen_range(0..=h - sh),
                w: sw,
                h: sh,
                vx,
                vy,
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(config.frames);
    let mut labels = Vec::with_capacity(config.frames);
    for _ in 0..config.frames {
        let mut data = Vec::with_capacity((h * w) as usize);
        let mut lab = Vec::with_capacity((h * w) as usize);
        for y in 0..h {
            for x in 0..w {
                // later shapes draw on top
                match shapes.iter().rev().find(|s| s.contains(x, y)) {
                    Some(s) => {
                        data.push(s.value(x, y));
                        lab.push(s.class);
                    }
                    None => {
                        data.push(background(x, y));
                        lab.push(0);
                    }
                }
            }
        }
        frames.push(Tensor::new(&[1, h as usize, w as usize], data)?);
        labels.push(LabelMap::new(h as usize, w as usize, lab)?);
        for s in &mut shapes {
            if config.deform > 0.0 {
                s.deform(config, w, h, &mut rng);
            }
            s.step(w, h);
        }
    }
    Ok(SynthClip { frames, labels })
}

/// Clips `first..first + count`.
pub fn generate(config: &SynthConfig, first: u64, count: usize) -> Result<Vec<SynthClip>> {
    (first..first + count as u64).map(|i| generate_clip(config, i)).collect()
}
