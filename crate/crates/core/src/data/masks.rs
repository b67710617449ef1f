//! Corruption masks: drifting elliptical "specular" blobs and oriented
//! "instrument" bars.
//!
//! Shape sizes share one global scale, found by bisection so the corrupted
//! fraction of the whole clip lands as close as possible to the target.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::Clip;
use crate::rng::SplitMix64;
use crate::{Error, Result};

const FRACTION_TOLERANCE: f64 = 0.03;
const BISECTION_STEPS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub seed: u64,
    /// Target corrupted fraction over the whole clip.
    pub fraction: f64,
    /// Inclusive blob count range.
    pub blobs: [usize; 2],
    /// Inclusive bar count range.
    pub bars: [usize; 2],
    /// Maximum per-frame drift of a shape centre, in normalised units.
    pub max_drift: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { seed: 0, fraction: 0.08, blobs: [2, 4], bars: [0, 1], max_drift: 0.04 }
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Blob { center: [f64; 2], velocity: [f64; 2], radii: [f64; 2] },
    Bar { anchor: [f64; 2], velocity: [f64; 2], direction: [f64; 2], length: f64, width: f64 },
}

impl Shape {
    fn covers(&self, t: f64, p: [f64; 2], scale: f64) -> bool {
        match self {
            Shape::Blob { center, velocity, radii } => {
                let dx = (p[0] - center[0] - t * velocity[0]) / (radii[0] * scale);
                let dy = (p[1] - center[1] - t * velocity[1]) / (radii[1] * scale);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Bar { anchor, velocity, direction, length, width } => {
                let rx = p[0] - anchor[0] - t * velocity[0];
                let ry = p[1] - anchor[1] - t * velocity[1];
                let along = rx * direction[0] + ry * direction[1];
                let across = (rx * direction[1] - ry * direction[0]).abs();
                (0.0..=*length).contains(&along) && across <= width * scale
            }
        }
    }
}

fn count_in(rng: &mut SplitMix64, range: [usize; 2]) -> usize {
    range[0] + rng.below(range[1] - range[0] + 1)
}

fn shapes(spec: &MaskSpec) -> Vec<Shape> {
    let mut rng = SplitMix64::new(spec.seed);
    let velocity = |rng: &mut SplitMix64| [rng.uniform(-spec.max_drift, spec.max_drift), rng.uniform(-spec.max_drift, spec.max_drift)];
    let mut out = Vec::new();
    for _ in 0..count_in(&mut rng, spec.blobs) {
        let center = [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)];
        let v = velocity(&mut rng);
        out.push(Shape::Blob { center, velocity: v, radii: [rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)] });
    }
    for _ in 0..count_in(&mut rng, spec.bars) {
        // Bars enter from the frame border, like an instrument tip.
        let angle = rng.uniform(0.0, core::f64::consts::TAU);
        let anchor = [-1.2 * angle.cos(), -1.2 * angle.sin()];
        let v = velocity(&mut rng);
        let spread = rng.uniform(-0.4, 0.4);
        let direction = [(angle + spread).cos(), (angle + spread).sin()];
        out.push(Shape::Bar { anchor, velocity: v, direction, length: rng.uniform(0.8, 1.4), width: rng.uniform(0.3, 0.6) });
    }
    out
}

fn render(shapes: &[Shape], scale: f64, frames: usize, height: usize, width: usize) -> (Vec<f32>, usize) {
    let mut data = alloc::vec![1.0f32; frames * height * width];
    let mut corrupted = 0;
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let p = [2.0 * (x as f64 + 0.5) / width as f64 - 1.0, 2.0 * (y as f64 + 0.5) / height as f64 - 1.0];
                if shapes.iter().any(|s| s.covers(t as f64, p, scale)) {
                    data[(t * height + y) * width + x] = 0.0;
                    corrupted += 1;
                }
            }
        }
    }
    (data, corrupted)
}

/// A one-channel mask clip, 0 = corrupted, 1 = valid.
pub fn generate_masks(spec: &MaskSpec, frames: usize, height: usize, width: usize) -> Result<Clip> {
    if !(0.0..0.5).contains(&spec.fraction) {
        return Err(Error::Config(alloc::format!("mask fraction {} must lie in [0, 0.5)", spec.fraction)));
    }
    if spec.blobs[0] > spec.blobs[1] || spec.bars[0] > spec.bars[1] {
        return Err(Error::Config("mask shape count ranges must be ordered".into()));
    }
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Config(alloc::format!("mask extents {frames}×{height}×{width} must be positive")));
    }
    if spec.fraction == 0.0 {
        return Clip::new(frames, 1, height, width, alloc::vec![1.0; frames * height * width]);
    }
    let shapes = shapes(spec);
    if shapes.is_empty() {
        return Err(Error::Config("a nonzero mask fraction needs at least one shape".into()));
    }
    let total = (frames * height * width) as f64;
    let fraction = |s: f64| render(&shapes, s, frames, height, width).1 as f64 / total;
    let (mut lo, mut hi) = (0.0, 0.05);
    while fraction(hi) < spec.fraction {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Config("mask shapes cannot reach the target fraction".into()));
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if fraction(mid) < spec.fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = if (fraction(lo) - spec.fraction).abs() <= (fraction(hi) - spec.fraction).abs() { lo } else { hi };
    let (data, corrupted) = render(&shapes, best, frames, height, width);
    let realized = corrupted as f64 / total;
    if (realized - spec.fraction).abs() > FRACTION_TOLERANCE {
        return Err(Error::Config(alloc::format!(
            "realized mask fraction {realized:.4} misses target {} on a {frames}×{height}×{width} clip",
            spec.fraction
        )));
    }
    Clip::new(frames, 1, height, width, data)
}
