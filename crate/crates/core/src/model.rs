//! The full generator: encode the masked frames, run the transformer stack
//! and its depth head, fuse visual and depth features pairwise, decode.

use alloc::vec::Vec;

use crate::bmpcf::Bmpcf;
use crate::codec::{Decoder, DecoderSpec, Encoder, EncoderSpec};
use crate::config::ModelConfig;
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bindings, ParamStore};
use crate::rng::SplitMix64;
use crate::stgde::{Stgde, TokenMask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub encoder: Encoder,
    pub stgde: Stgde,
    pub bmpcf: Bmpcf,
    pub decoder: Decoder,
}

pub struct GeneratorOutput {
    /// `Ŷ`, `(clips·T)×3×H×W`.
    pub frames: Var,
    /// `D̂`, `(clips·T)×1×H×W`.
    pub depth: Var,
    /// `F^i_att` of every block.
    pub attention: Vec<Var>,
}

impl Generator {
    pub fn new<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        let c = cfg.base_channels;
        let encoder = Encoder::new("encoder", EncoderSpec { in_channels: 3, base_channels: c }, store, rng);
        let stgde = Stgde::new(cfg.blocks, c, cfg.ffn_expansion, cfg.grid(), cfg.mask_rule, store, rng);
        let bmpcf = Bmpcf::new(c, cfg.fusion_kernel, store, rng);
        let decoder = Decoder::new("decoder", DecoderSpec { base_channels: c, out_channels: 3 }, store, rng);
        Self { encoder, stgde, bmpcf, decoder }
    }

    /// `x_masked` is `X ⊙ M`, `(clips·T)×3×H×W`, with `mask` giving key
    /// validity per token.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x_masked: Var, mask: &TokenMask) -> Result<GeneratorOutput> {
        let n = tape.shape(x_masked)[0];
        if mask.clips == 0 || n % mask.clips != 0 || mask.valid.len() != n * self.stgde.grid.patches() {
            return Err(Error::Contract(alloc::format!(
                "token mask for {} clips and {} tokens does not match {n} frames",
                mask.clips,
                mask.valid.len()
            )));
        }
        let f = self.encoder.encode_frames(tape, p, x_masked)?;
        let s = self.stgde.forward(tape, p, f, mask)?;
        let fused = self.bmpcf.forward(tape, p, s.features, s.depth)?;
        let frames = self.decoder.decode_frames(tape, p, fused)?;
        Ok(GeneratorOutput { frames, depth: s.depth, attention: s.attention })
    }
}
