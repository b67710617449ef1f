//! Clips, synthetic scenes, corruption masks and crop metrics.

mod masks;
mod metrics;
mod synth;

pub use masks::{generate_masks, MaskSpec};
pub use metrics::{mse_crop, psnr_crop, ssim_crop, PSNR_CAP};
pub use synth::{generate_clip, Polyp, SyntheticScene};

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{Array, Real};
use crate::{Error, Result};

/// `T` frames of `C` planar `H×W` channels, frame-major. Colour clips have
/// `C = 3`; depth maps and corruption masks (0 = corrupted, 1 = valid) have
/// `C = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Clip {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let n = frames
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::Data(format!("clip extents {frames}×{channels}×{height}×{width} overflow")))?;
        if data.len() != n {
            return Err(Error::Data(format!("clip of {n} values given {}", data.len())));
        }
        Ok(Self { frames, channels, height, width, data })
    }

    pub fn filled(frames: usize, channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { frames, channels, height, width, data: alloc::vec![value; frames * channels * height * width] }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((t * self.channels + c) * self.height + y) * self.width + x]
    }

    pub fn same_extent(&self, other: &Clip) -> bool {
        (self.frames, self.height, self.width) == (other.frames, other.height, other.width)
    }

    /// Frames at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Clip> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &t in indices {
            if t >= self.frames {
                return Err(Error::Data(format!("frame {t} of a {}-frame clip", self.frames)));
            }
            data.extend_from_slice(self.frame(t));
        }
        Clip::new(indices.len(), self.channels, self.height, self.width, data)
    }

    /// Frames of `clips` stacked in order; all must share one geometry.
    pub fn stack(clips: &[Clip]) -> Result<Clip> {
        let first = clips.first().ok_or_else(|| Error::Data("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for c in clips {
            if (c.channels, c.height, c.width) != (first.channels, first.height, first.width) {
                return Err(Error::Data("stacked clips differ in geometry".into()));
            }
            frames += c.frames;
            data.extend_from_slice(&c.data);
        }
        Clip::new(frames, first.channels, first.height, first.width, data)
    }

    /// `T×C×H×W` array.
    pub fn to_array<T: Real>(&self) -> Array<T> {
        Array::new(&[self.frames, self.channels, self.height, self.width], self.data.iter().map(|&v| T::from_f64(v as f64)).collect())
            .expect("clip length is checked at construction")
    }

    pub fn from_array<T: Real>(a: &Array<T>) -> Result<Clip> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("clip arrays are T×C×H×W, got {:?}", s)));
        }
        Clip::new(s[0], s[1], s[2], s[3], a.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// `X ⊙ M` with a one-channel mask broadcast over channels.
    pub fn masked(&self, mask: &Clip) -> Result<Clip> {
        check_mask(self, mask)?;
        let plane = self.height * self.width;
        let mut out = self.clone();
        for t in 0..self.frames {
            let m = mask.frame(t);
            for c in 0..self.channels {
                let start = (t * self.channels + c) * plane;
                for (v, &mv) in out.data[start..start + plane].iter_mut().zip(m) {
                    *v *= mv;
                }
            }
        }
        Ok(out)
    }
}

/// `mask` must be a one-channel clip with `clip`'s extent.
pub fn check_mask(clip: &Clip, mask: &Clip) -> Result<()> {
    if mask.channels != 1 || !clip.same_extent(mask) {
        return Err(Error::Data(format!(
            "mask {}×{}×{}×{} does not cover clip {}×{}×{}×{}",
            mask.frames, mask.channels, mask.height, mask.width, clip.frames, clip.channels, clip.height, clip.width
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn is_corrupted(m: f32) -> bool {
    m < 0.5
}
