//! Paired-channel fusion of visual and depth features.
//!
//! The estimated depth is re-embedded to the visual latent's shape, the two
//! maps are interleaved so channel `2i` is visual channel `i` and channel
//! `2i+1` is depth channel `i`, and a grouped convolution with one group per
//! pair produces one fused channel per pair.

use alloc::format;

use crate::codec::{Encoder, EncoderSpec};
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bindings, Conv2d, Conv2dSpec, Init, ParamStore};
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bmpcf {
    pub depth_encoder: Encoder,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Bmpcf {
    /// `kernel` is the spatial size of each pair's fusion kernel (3 by
    /// default, 1 for pure channel mixing).
    pub fn new<T: Real>(base_channels: usize, kernel: usize, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        let c = 4 * base_channels;
        let depth_encoder = Encoder::new("bmpcf.depth_encoder", EncoderSpec { in_channels: 1, base_channels }, store, rng);
        let fuse = Conv2dSpec::new("bmpcf.fuse", 2 * c, c, kernel).groups(c).init(Init::Fan).build(store, rng);
        Self { depth_encoder, fuse, channels: c }
    }

    /// `F_D = Enc_D(D̂)`, checked against the visual latent's shape.
    pub fn encode_depth<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, depth: Var, visual: Var) -> Result<Var> {
        let f_d = self.depth_encoder.encode_frames(tape, p, depth)?;
        if tape.shape(f_d) != tape.shape(visual) {
            return Err(Error::Contract(format!(
                "depth features {:?} do not match visual features {:?}",
                tape.shape(f_d),
                tape.shape(visual)
            )));
        }
        Ok(f_d)
    }

    pub fn fuse_pairs<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, paired: Var) -> Result<Var> {
        let s = tape.shape(paired);
        if s.len() != 4 || s[1] % 2 != 0 || s[1] / 2 != self.channels {
            return Err(Error::Contract(format!("paired features {:?} for {} pairs", s, self.channels)));
        }
        self.fuse.forward(tape, p, paired)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, visual: Var, depth: Var) -> Result<Var> {
        let f_d = self.encode_depth(tape, p, depth, visual)?;
        let paired = interleave_channels(tape, visual, f_d)?;
        self.fuse_pairs(tape, p, paired)
    }
}

/// `N×c×h×w`, `N×c×h×w` → `N×2c×h×w` with visual on even and depth on odd
/// channels.
pub fn interleave_channels<T: Real>(tape: &mut Tape<T>, visual: Var, depth: Var) -> Result<Var> {
    let s = tape.shape(visual).to_vec();
    if s.len() != 4 || tape.shape(depth) != s.as_slice() {
        return Err(Error::Contract(format!("cannot pair {:?} with {:?}", s, tape.shape(depth))));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let v = tape.reshape(visual, &[n, c, 1, hw])?;
    let d = tape.reshape(depth, &[n, c, 1, hw])?;
    let paired = tape.concat(&[v, d], 2)?;
    tape.reshape(paired, &[n, 2 * c, s[2], s[3]])
}

/// Inverse of [`interleave_channels`]: `(visual, depth)`.
pub fn deinterleave_channels<T: Real>(tape: &mut Tape<T>, paired: Var) -> Result<(Var, Var)> {
    let s = tape.shape(paired).to_vec();
    if s.len() != 4 || s[1] % 2 != 0 {
        return Err(Error::Contract(format!("cannot split {:?} into channel pairs", s)));
    }
    let (n, c, hw) = (s[0], s[1] / 2, s[2] * s[3]);
    let x = tape.reshape(paired, &[n, c, 2, hw])?;
    let v = tape.slice(x, 2, 0, 1)?;
    let d = tape.slice(x, 2, 1, 1)?;
    Ok((tape.reshape(v, &[n, c, s[2], s[3]])?, tape.reshape(d, &[n, c, s[2], s[3]])?))
}
