//! Procedural scenes with exact flow and depth, for tests and desk-scale runs.
//!
//! A scene is a textured background translating rigidly plus one textured
//! rectangle moving independently. Both textures are sums of sinusoids, so
//! they can be sampled at sub-pixel positions and the flow `frame1 → frame2`
//! is known exactly: `frame1(x) = frame2(x + flow(x))` wherever the pixel
//! stays visible.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FramePair, SyntheticSource};
use crate::error::Result;
use crate::fogphys::FogRanges;
use crate::raster::{FlowField, Image, ScalarMap};

/// Depth assigned to the sky band, the largest value a 16-bit depth PNG holds.
pub const SKY_DEPTH: f32 = 655.35;

#[derive(Debug, Clone)]
struct Texture {
    /// Per channel: (amplitude, frequency x, frequency y, phase).
    waves: [[(f32, f32, f32, f32); 3]; 3],
    base: [f32; 3],
}

impl Texture {
    fn random(rng: &mut impl Rng, base_range: (f32, f32)) -> Self {
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for ch in &mut waves {
            for w in ch.iter_mut() {
                let period_x = rng.random_range(6.0..32.0f32);
                let period_y = rng.random_range(6.0..32.0f32);
                let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
                *w = (
                    rng.random_range(0.04..0.12f32),
                    sx * TAU / period_x,
                    TAU / period_y,
                    rng.random_range(0.0..TAU),
                );
            }
        }
        let base = [0; 3].map(|_| rng.random_range(base_range.0..base_range.1));
        Self { waves, base }
    }

    fn sample(&self, x: f32, y: f32) -> [f32; 3] {
        let mut out = self.base;
        for (c, ch) in self.waves.iter().enumerate() {
            for &(a, fx, fy, ph) in ch {
                out[c] += a * (fx * x + fy * y + ph).sin();
            }
            out[c] = out[c].clamp(0.02, 0.98);
        }
        out
    }
}

/// One procedural frame pair with ground truth.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub frame1: Image,
    pub frame2: Image,
    pub depth1: ScalarMap,
    pub depth2: ScalarMap,
    pub flow: FlowField,
}

/// Draws a scene of `height × width` pixels.
///
/// Background motion is up to 3 px per axis, the object's up to 6 px.
pub fn toy_scene(height: usize, width: usize, rng: &mut impl Rng) -> Result<ToyScene> {
    let ground = Texture::random(rng, (0.25, 0.6));
    let sky = Texture::random(rng, (0.75, 0.85));
    let object = Texture::random(rng, (0.2, 0.7));
    let horizon = (height as f32 * rng.random_range(0.15..0.3f32)).round();
    let bg_motion = [rng.random_range(-3.0..3.0f32), rng.random_range(-1.5..1.5f32)];
    let obj_motion = [rng.random_range(-6.0..6.0f32), rng.random_range(-3.0..3.0f32)];
    let obj_h = (height as f32 * rng.random_range(0.25..0.45f32)).round();
    let obj_w = (width as f32 * rng.random_range(0.15..0.3f32)).round();
    let obj_top = rng.random_range(horizon..(height as f32 - obj_h).max(horizon + 1.0)).round();
    let obj_left = rng.random_range(0.0..(width as f32 - obj_w)).round();
    let obj_depth = rng.random_range(8.0..20.0f32);
    let h_max = height as f32 - 1.0;

    // background content at world position (wx, wy)
    let background = |wx: f32, wy: f32| -> ([f32; 3], f32) {
        if wy < horizon {
            (sky.sample(wx * 0.5, wy * 0.5), SKY_DEPTH)
        } else {
            let t = ((wy - horizon) / (h_max - horizon).max(1.0)).clamp(0.0, 1.0);
            (ground.sample(wx, wy), 80.0 - 75.0 * t.sqrt())
        }
    };
    // object content at object-local position, if inside
    let inside = |ox: f32, oy: f32| ox >= 0.0 && ox < obj_w && oy >= 0.0 && oy < obj_h;

    let render = |shift: f32| -> Result<(Image, ScalarMap)> {
        let (bx, by) = (bg_motion[0] * shift, bg_motion[1] * shift);
        let (ox0, oy0) = (obj_left + obj_motion[0] * shift, obj_top + obj_motion[1] * shift);
        let mut depth = vec![0f32; height * width];
        let img = Image::from_fn(height, width, |y, x| {
            let (xf, yf) = (x as f32, y as f32);
            let (lx, ly) = (xf - ox0, yf - oy0);
            if inside(lx, ly) {
                depth[y * width + x] = obj_depth;
                object.sample(lx, ly)
            } else {
                let (c, d) = background(xf - bx, yf - by);
                depth[y * width + x] = d;
                c
            }
        })?;
        Ok((img, ScalarMap::new(height, width, depth)?))
    };
    let (frame1, depth1) = render(0.0)?;
    let (frame2, depth2) = render(1.0)?;
    let flow = FlowField::from_fn(height, width, |y, x| {
        if inside(x as f32 - obj_left, y as f32 - obj_top) {
            obj_motion
        } else {
            bg_motion
        }
    })?;
    Ok(ToyScene {
        frame1,
        frame2,
        depth1,
        depth2,
        flow,
    })
}

fn scenes(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ToyScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_scene(height, width, &mut rng)).collect()
}

/// Synthetic-stage sources: clean frames, depths and flow.
pub fn toy_synthetic_set(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<SyntheticSource>> {
    Ok(scenes(n, height, width, seed)?
        .into_iter()
        .map(|s| SyntheticSource {
            clean1: s.frame1,
            clean2: s.frame2,
            depth1: s.depth1,
            depth2: s.depth2,
            flow: s.flow,
        })
        .collect())
}

/// Clean pairs; the ground-truth flow is kept for evaluation only.
pub fn toy_clean_pairs(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<FramePair>> {
    Ok(scenes(n, height, width, seed)?
        .into_iter()
        .map(|s| FramePair {
            frame1: s.frame1,
            frame2: s.frame2,
            flow: Some(s.flow),
        })
        .collect())
}

/// Fog pairs rendered with one random fog per pair; ground truth kept for evaluation.
pub fn toy_fog_pairs(n: usize, height: usize, width: usize, seed: u64, ranges: &FogRanges) -> Result<Vec<FramePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    scenes(n, height, width, seed)?
        .into_iter()
        .map(|s| {
            let fog = ranges.sample(&mut rng);
            Ok(FramePair {
                frame1: fog.render(&s.frame1, &s.depth1)?,
                frame2: fog.render(&s.frame2, &s.depth2)?,
                flow: Some(s.flow),
            })
        })
        .collect()
}
