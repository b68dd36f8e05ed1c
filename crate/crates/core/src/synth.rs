//! Procedural natural-looking clips for fixtures and demos.
//!
//! A scene is a large textured canvas (multi-octave value noise over a colour
//! gradient) with a few hard-edged moving shapes; a camera window pans across
//! it so consecutive frames share content but are never identical.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Clip, Frame};
use crate::error::Result;
use crate::rng::{self, Stream};

const CHROMA: f32 = 0.15;

struct ValueNoise {
    size: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new(r: &mut ChaCha8Rng, size: usize) -> Self {
        Self {
            size,
            grid: (0..size * size).map(|_| r.random::<f32>()).collect(),
        }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        let s = self.size as f32;
        let (x, y) = ((u * s).rem_euclid(s), (v * s).rem_euclid(s));
        let (x0, y0) = (x.floor() as usize % self.size, y.floor() as usize % self.size);
        let (x1, y1) = ((x0 + 1) % self.size, (y0 + 1) % self.size);
        let (fx, fy) = (x - x.floor(), y - y.floor());
        let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
        let g = |i: usize, j: usize| self.grid[j * self.size + i];
        let top = g(x0, y0) * (1.0 - sx) + g(x1, y0) * sx;
        let bot = g(x0, y1) * (1.0 - sx) + g(x1, y1) * sx;
        top * (1.0 - sy) + bot * sy
    }
}

struct Shape {
    color: [f32; 3],
    center: (f32, f32),
    velocity: (f32, f32),
    radius: f32,
    square: bool,
}

struct Scene {
    base: [[f32; 3]; 2],
    octaves: Vec<(ValueNoise, f32)>,
    tint: ValueNoise,
    shapes: Vec<Shape>,
    pan: (f32, f32),
}

impl Scene {
    fn new(seed: u64, clip_id: &str) -> Self {
        let mut r = rng::keyed(seed, Stream::Synth, clip_id, 0);
        // luma plus a moderate chroma offset
        let color = |r: &mut ChaCha8Rng| {
            let luma: f32 = r.random_range(0.2..0.8);
            let chroma: [f32; 3] = std::array::from_fn(|_| r.random_range(-CHROMA..CHROMA));
            chroma.map(|c| (luma + c).clamp(0.0, 1.0))
        };
        let base = [color(&mut r), color(&mut r)];
        let octaves = [(4usize, 0.5f32), (8, 0.25), (16, 0.15), (32, 0.10)]
            .into_iter()
            .map(|(s, a)| (ValueNoise::new(&mut r, s), a))
            .collect();
        let tint = ValueNoise::new(&mut r, 3);
        let n_shapes = r.random_range(2..5);
        let shapes = (0..n_shapes)
            .map(|_| Shape {
                color: color(&mut r),
                center: (r.random_range(0.2..0.8), r.random_range(0.2..0.8)),
                velocity: (r.random_range(-0.02..0.02), r.random_range(-0.02..0.02)),
                radius: r.random_range(0.08..0.2),
                square: r.random_bool(0.5),
            })
            .collect();
        let pan = (r.random_range(-0.01..0.01), r.random_range(-0.01..0.01));
        Self {
            base,
            octaves,
            tint,
            shapes,
            pan,
        }
    }

    fn pixel(&self, u: f32, v: f32, t: f32) -> [f32; 3] {
        let (cu, cv) = (u + self.pan.0 * t, v + self.pan.1 * t);
        let texture: f32 = self.octaves.iter().map(|(n, a)| a * n.at(cu, cv)).sum::<f32>() - 0.5;
        let mix = self.tint.at(cu, cv);
        let mut px: [f32; 3] =
            std::array::from_fn(|c| self.base[0][c] * (1.0 - mix) + self.base[1][c] * mix + 0.5 * texture);
        for s in &self.shapes {
            let (sx, sy) = (s.center.0 + s.velocity.0 * t, s.center.1 + s.velocity.1 * t);
            let (dx, dy) = (cu - sx, cv - sy);
            let inside = if s.square {
                dx.abs().max(dy.abs()) < s.radius
            } else {
                dx * dx + dy * dy < s.radius * s.radius
            };
            if inside {
                let stripe = if ((dx + dy) * 40.0).sin() > 0.0 { 0.08 } else { -0.08 };
                px = std::array::from_fn(|c| s.color[c] + stripe + 0.3 * texture);
            }
        }
        px.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Deterministic `frames`-long clip of `height x width` frames.
pub fn generate_clip(seed: u64, clip_id: &str, frames: usize, height: usize, width: usize) -> Result<Clip> {
    let scene = Scene::new(seed, clip_id);
    let n = height * width;
    let out = (0..frames)
        .map(|t| {
            let mut data = vec![0f32; 3 * n];
            for y in 0..height {
                for x in 0..width {
                    let px = scene.pixel(x as f32 / width as f32, y as f32 / height as f32, t as f32);
                    for c in 0..3 {
                        data[c * n + y * width + x] = px[c];
                    }
                }
            }
            Frame::new(clip_id, t, height, width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Clip::new(clip_id, out)
}

/// Writes `clips` clips as a `davis_style` tree under `root` (PNG, lossless).
pub fn write_dataset(root: &Path, clips: usize, frames: usize, height: usize, width: usize, seed: u64) -> Result<Vec<String>> {
    let ids: Vec<String> = (0..clips).map(|i| format!("scene{i:02}")).collect();
    crate::par::try_map(ids.len(), |i| {
        generate_clip(seed, &ids[i], frames, height, width)?.save_frames(&root.join(&ids[i]))
    })?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_are_deterministic_and_moving() {
        let a = generate_clip(3, "s", 3, 32, 48).unwrap();
        let b = generate_clip(3, "s", 3, 32, 48).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames()[0].data(), a.frames()[2].data());
        let c = generate_clip(3, "t", 3, 32, 48).unwrap();
        assert_ne!(a.frames()[0].data(), c.frames()[0].data());
    }
}
