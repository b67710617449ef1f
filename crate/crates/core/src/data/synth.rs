//! Procedural tube-interior scenes with analytic depth.
//!
//! Pixel `(x, y)` maps to `p = (2(x+½)/W − 1, 2(y+½)/H − 1)`. The camera
//! translates by `drift` per frame, so scene coordinates are `q = p + t·drift`.
//! Depth is the normalised radial distance `|q|/√2` minus a Gaussian bump for
//! every polyp, clamped to `[0, 1]`: the tube centre is near and the walls
//! towards the corners recede.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::Clip;
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Polyp {
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub height: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub inner_color: [f64; 3],
    pub outer_color: [f64; 3],
    pub texture_frequency: [f64; 2],
    pub texture_amplitude: f64,
    pub texture_phase: f64,
    pub drift: [f64; 2],
    pub polyps: Vec<Polyp>,
}

impl SyntheticScene {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let inner_color = [rng.uniform(0.75, 0.95), rng.uniform(0.45, 0.6), rng.uniform(0.4, 0.55)];
        let outer_color = [rng.uniform(0.3, 0.45), rng.uniform(0.08, 0.18), rng.uniform(0.08, 0.16)];
        let texture_frequency = [rng.uniform(6.0, 12.0), rng.uniform(6.0, 12.0)];
        let texture_amplitude = rng.uniform(0.04, 0.08);
        let texture_phase = rng.uniform(0.0, core::f64::consts::TAU);
        let angle = rng.uniform(0.0, core::f64::consts::TAU);
        let speed = rng.uniform(0.01, 0.03);
        let drift = [speed * angle.cos(), speed * angle.sin()];
        let count = 1 + rng.below(3);
        let polyps = (0..count)
            .map(|_| Polyp {
                center: [rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)],
                velocity: [rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01)],
                radius: rng.uniform(0.12, 0.25),
                height: rng.uniform(0.1, 0.25),
                color: [rng.uniform(0.7, 0.9), rng.uniform(0.3, 0.45), rng.uniform(0.3, 0.4)],
            })
            .collect();
        Self { inner_color, outer_color, texture_frequency, texture_amplitude, texture_phase, drift, polyps }
    }

    /// The same scene with the camera and all polyps held still.
    pub fn frozen(mut self) -> Self {
        self.drift = [0.0, 0.0];
        for p in &mut self.polyps {
            p.velocity = [0.0, 0.0];
        }
        self
    }

    /// `(rgb, depth)` at pixel coordinates `p` of frame `t`.
    pub fn sample(&self, t: usize, p: [f64; 2]) -> ([f64; 3], f64) {
        let tf = t as f64;
        let q = [p[0] + tf * self.drift[0], p[1] + tf * self.drift[1]];
        let r = ((q[0] * q[0] + q[1] * q[1]).sqrt() / core::f64::consts::SQRT_2).min(1.0);
        let mut depth = r;
        let mut color = [0.0; 3];
        for (c, (a, b)) in color.iter_mut().zip(self.inner_color.iter().zip(&self.outer_color)) {
            *c = a + (b - a) * r;
        }
        let tex = self.texture_amplitude * (self.texture_frequency[0] * q[0] + self.texture_phase).sin() * (self.texture_frequency[1] * q[1]).cos();
        for c in &mut color {
            *c += tex;
        }
        for polyp in &self.polyps {
            let cx = polyp.center[0] + tf * polyp.velocity[0];
            let cy = polyp.center[1] + tf * polyp.velocity[1];
            let d2 = (q[0] - cx).powi(2) + (q[1] - cy).powi(2);
            let w = (-d2 / (polyp.radius * polyp.radius)).exp();
            depth -= polyp.height * w;
            for (c, pc) in color.iter_mut().zip(&polyp.color) {
                *c += (pc - *c) * w;
            }
        }
        (color.map(|c| c.clamp(0.0, 1.0)), depth.clamp(0.0, 1.0))
    }
}

/// `(frames, depth)` clips of the scene.
pub fn generate_clip(scene: &SyntheticScene, frames: usize, height: usize, width: usize) -> Result<(Clip, Clip)> {
    if frames == 0 || height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::Config(alloc::format!(
            "clip extents {frames}×{height}×{width} need T ≥ 1 and H, W positive multiples of 4"
        )));
    }
    let plane = height * width;
    let mut rgb = alloc::vec![0.0f32; frames * 3 * plane];
    let mut depth = alloc::vec![0.0f32; frames * plane];
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let p = [2.0 * (x as f64 + 0.5) / width as f64 - 1.0, 2.0 * (y as f64 + 0.5) / height as f64 - 1.0];
                let (c, d) = scene.sample(t, p);
                let i = y * width + x;
                for (ch, v) in c.iter().enumerate() {
                    rgb[(t * 3 + ch) * plane + i] = *v as f32;
                }
                depth[t * plane + i] = d as f32;
            }
        }
    }
    Ok((Clip::new(frames, 3, height, width, rgb)?, Clip::new(frames, 1, height, width, depth)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_clip(&SyntheticScene::from_seed(3), 3, 8, 8).unwrap();
        let b = generate_clip(&SyntheticScene::from_seed(3), 3, 8, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, generate_clip(&SyntheticScene::from_seed(4), 3, 8, 8).unwrap().0);
    }

    #[test]
    fn frozen_scene_repeats_frames() {
        let (rgb, depth) = generate_clip(&SyntheticScene::from_seed(1).frozen(), 4, 8, 8).unwrap();
        for t in 1..4 {
            assert_eq!(rgb.frame(t), rgb.frame(0));
            assert_eq!(depth.frame(t), depth.frame(0));
        }
    }

    #[test]
    fn moving_scene_changes() {
        let (rgb, _) = generate_clip(&SyntheticScene::from_seed(1), 2, 16, 16).unwrap();
        assert_ne!(rgb.frame(1), rgb.frame(0));
    }

    #[test]
    fn centre_is_nearer_than_corner() {
        let scene = SyntheticScene { polyps: Vec::new(), ..SyntheticScene::from_seed(0) };
        let (_, depth) = generate_clip(&scene, 1, 16, 16).unwrap();
        assert!(depth.at(0, 0, 8, 8) < depth.at(0, 0, 0, 0));
        // |q| / √2 at the corner pixel centre, evaluated by hand.
        let corner = ((2.0f64 * (15.0f64 / 16.0).powi(2)).sqrt() / 2f64.sqrt()) as f32;
        assert_eq!(depth.at(0, 0, 0, 0), corner);
    }

    #[test]
    fn ranges() {
        let (rgb, depth) = generate_clip(&SyntheticScene::from_seed(9), 2, 16, 16).unwrap();
        assert!(rgb.data.iter().chain(&depth.data).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_extents() {
        let s = SyntheticScene::from_seed(0);
        assert!(matches!(generate_clip(&s, 1, 6, 8), Err(Error::Config(_))));
        assert!(matches!(generate_clip(&s, 0, 8, 8), Err(Error::Config(_))));
    }
}
