//! Procedural moving-shapes videos with analytic depth.
//!
//! Conventions: depth is normalized to `[-1, 1]` with near = small. The static
//! background sits at [`BACKGROUND_DEPTH`]; every object has a constant depth in
//! `[OBJECT_DEPTH_MIN, OBJECT_DEPTH_MAX]`. RGB renders a two-band background
//! (sky above the horizon, ground below) and paints each object with a color
//! that is a fixed function of its depth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::video::VideoTensor;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const BACKGROUND_DEPTH: f32 = 0.9;
pub const OBJECT_DEPTH_MIN: f32 = -0.8;
pub const OBJECT_DEPTH_MAX: f32 = 0.3;
/// Midpoint between the farthest object and the background.
pub const DEPTH_THRESHOLD: f32 = 0.6;
pub const SKY_COLOR: [f32; 3] = [-0.6, -0.5, -0.1];
pub const GROUND_COLOR: [f32; 3] = [-0.4, -0.4, -0.4];
/// Max per-channel deviation from the background palette that still counts as background.
pub const COLOR_THRESHOLD: f32 = 0.6;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Pixels per frame.
    pub min_speed: f32,
    pub max_speed: f32,
    /// Half-extent (rectangles) or radius (discs), in pixels.
    pub min_size: f32,
    pub max_size: f32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 16,
            width: 16,
            min_objects: 1,
            max_objects: 3,
            min_speed: 0.5,
            max_speed: 1.5,
            min_size: 2.0,
            max_size: 3.5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(1..=256).contains(&self.frames) {
            return bad(format!("frames {} outside [1, 256]", self.frames));
        }
        if !(4..=1024).contains(&self.height) || !(4..=1024).contains(&self.width) {
            return bad(format!("spatial size {}x{} outside [4, 1024]", self.height, self.width));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return bad(format!("object count range {}..={} must lie in 1..=3", self.min_objects, self.max_objects));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed) {
            return bad(format!("speed range {}..{}", self.min_speed, self.max_speed));
        }
        let limit = self.height.min(self.width) as f32 / 2.0;
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < limit) {
            return bad(format!("size range {}..{} must be positive and below {limit}", self.min_size, self.max_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Rect { half_w: f32, half_h: f32 },
    Disc { radius: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    #[serde(flatten)]
    pub shape: Shape,
    pub start: [f32; 2],
    pub velocity: [f32; 2],
    pub depth: f32,
}

impl ToyObject {
    pub fn center(&self, frame: usize) -> [f32; 2] {
        [self.start[0] + self.velocity[0] * frame as f32, self.start[1] + self.velocity[1] * frame as f32]
    }

    fn covers(&self, frame: usize, px: f32, py: f32) -> bool {
        let [cx, cy] = self.center(frame);
        match self.shape {
            Shape::Rect { half_w, half_h } => (px - cx).abs() <= half_w && (py - cy).abs() <= half_h,
            Shape::Disc { radius } => (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius,
        }
    }
}

/// RGB color for an object at normalized depth `depth`.
pub fn object_color(depth: f32) -> [f32; 3] {
    let u = ((depth - OBJECT_DEPTH_MIN) / (OBJECT_DEPTH_MAX - OBJECT_DEPTH_MIN)).clamp(0.0, 1.0);
    [0.9, 0.9 - 1.4 * u, -0.5 + 1.4 * u]
}

/// Background color at row `y` of a frame with `height` rows.
pub fn background_color(y: usize, height: usize) -> [f32; 3] {
    if y < height / 2 {
        SKY_COLOR
    } else {
        GROUND_COLOR
    }
}

/// The objects of sample `index` in a dataset generated with `seed`.
pub fn sample_objects(cfg: &ToyConfig, seed: u64, index: u64) -> Vec<ToyObject> {
    let mut rng = stream_rng(seed, index);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let (w, h) = (cfg.width as f32, cfg.height as f32);
    let span = cfg.frames.saturating_sub(1) as f32;
    (0..count)
        .map(|_| {
            let size = rng.random_range(cfg.min_size..=cfg.max_size);
            let shape = if rng.random_bool(0.5) {
                let aspect = rng.random_range(0.6f32..=1.0);
                Shape::Rect { half_w: size, half_h: (size * aspect).max(1.0) }
            } else {
                Shape::Disc { radius: size }
            };
            let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let velocity = [speed * angle.cos(), speed * angle.sin()];
            let start_axis = |extent: f32, v: f32, rng: &mut crate::rng::StreamRng| {
                let travel = v * span;
                let lo = size - travel.min(0.0);
                let hi = extent - size - travel.max(0.0);
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    (extent - travel) / 2.0
                }
            };
            let sx = start_axis(w, velocity[0], &mut rng);
            let sy = start_axis(h, velocity[1], &mut rng);
            let depth = rng.random_range(OBJECT_DEPTH_MIN..=OBJECT_DEPTH_MAX);
            ToyObject { shape, start: [sx, sy], velocity, depth }
        })
        .collect()
}

/// Render `(rgb, depth)` for a list of objects; nearer objects occlude farther ones.
pub fn render(cfg: &ToyConfig, objects: &[ToyObject]) -> (VideoTensor, VideoTensor) {
    let (f_n, h_n, w_n) = (cfg.frames, cfg.height, cfg.width);
    let mut order: Vec<&ToyObject> = objects.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let mut rgb = Vec::with_capacity(f_n * h_n * w_n * 3);
    let mut depth = Vec::with_capacity(f_n * h_n * w_n);
    for f in 0..f_n {
        for y in 0..h_n {
            for x in 0..w_n {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut color = background_color(y, h_n);
                let mut d = BACKGROUND_DEPTH;
                for obj in &order {
                    if obj.covers(f, px, py) {
                        color = object_color(obj.depth);
                        d = obj.depth;
                    }
                }
                rgb.extend_from_slice(&color);
                depth.push(d);
            }
        }
    }
    (
        VideoTensor::from_data(f_n, h_n, w_n, 3, rgb).expect("validated dims"),
        VideoTensor::from_data(f_n, h_n, w_n, 1, depth).expect("validated dims"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_colors_stay_far_from_background() {
        for i in 0..=100 {
            let d = OBJECT_DEPTH_MIN + (OBJECT_DEPTH_MAX - OBJECT_DEPTH_MIN) * i as f32 / 100.0;
            let c = object_color(d);
            for bg in [SKY_COLOR, GROUND_COLOR] {
                let dev = c.iter().zip(bg).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                assert!(dev > 2.0 * COLOR_THRESHOLD - 0.1, "depth {d}: deviation {dev}");
            }
            assert!(c.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn object_centers_move_linearly() {
        let cfg = ToyConfig { frames: 6, ..ToyConfig::default() };
        for index in 0..16 {
            for obj in sample_objects(&cfg, 5, index) {
                let c0 = obj.center(0);
                let c5 = obj.center(5);
                for f in 1..5 {
                    let c = obj.center(f);
                    let lerp = |a: f32, b: f32| a + (b - a) * f as f32 / 5.0;
                    assert!((c[0] - lerp(c0[0], c5[0])).abs() < 1e-4);
                    assert!((c[1] - lerp(c0[1], c5[1])).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn rasterized_centroid_follows_integer_motion() {
        let cfg = ToyConfig { frames: 5, height: 24, width: 24, ..ToyConfig::default() };
        let obj = ToyObject { shape: Shape::Rect { half_w: 2.0, half_h: 3.0 }, start: [6.0, 7.0], velocity: [2.0, 1.0], depth: 0.0 };
        let (_, depth) = render(&cfg, &[obj]);
        for f in 0..cfg.frames {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..24 {
                for x in 0..24 {
                    if depth.get(f, y, x, 0) < DEPTH_THRESHOLD {
                        sx += x as f32 + 0.5;
                        sy += y as f32 + 0.5;
                        n += 1.0;
                    }
                }
            }
            let c = obj.center(f);
            assert_eq!((sx / n, sy / n), (c[0], c[1]), "frame {f}");
        }
    }

    #[test]
    fn nearer_object_occludes() {
        let cfg = ToyConfig { frames: 1, ..ToyConfig::default() };
        let far = ToyObject { shape: Shape::Disc { radius: 3.0 }, start: [8.0, 8.0], velocity: [0.0; 2], depth: 0.2 };
        let near = ToyObject { shape: Shape::Disc { radius: 2.0 }, start: [8.0, 8.0], velocity: [0.0; 2], depth: -0.5 };
        let (rgb, depth) = render(&cfg, &[near, far]);
        assert_eq!(depth.get(0, 8, 8, 0), -0.5);
        assert_eq!(rgb.pixel(0, 8, 8), &object_color(-0.5));
        assert_eq!(depth.get(0, 8, 10, 0), 0.2);
    }
}
