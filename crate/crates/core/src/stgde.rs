//! Spatial-temporal transformer blocks and the depth head fed by them.
//!
//! Each block projects its input into queries, keys and values with 1×1
//! convolutions, adding a 3×3 depth-wise convolution to the values. The three
//! maps are cut into `r1×r2` patches per frame; every patch of every frame
//! in a clip becomes one token, so attention mixes content across space and
//! time. Scores are scaled by `1/√(r1·r2·c)`.
//!
//! Keys whose patch is entirely corrupted are excluded by writing `-inf`
//! into their score column before the softmax. Queries are never masked.
//!
//! Block output is `F' = M + FFN(M)` with `M = F + P_F(F_att)`. The depth
//! head decodes `Σ_i P_D^i(F_att^i)` over all blocks.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, DecoderSpec};
use crate::numerics::{Array, Real, Tape, Var};
use crate::params::{Bindings, Conv2d, Conv2dSpec, Init, ParamStore};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// How the token mask enters the score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Masked key columns are set to `-inf` before the softmax.
    #[default]
    Additive,
    /// Scores are multiplied by the 0/1 key mask, so masked keys score 0
    /// and still receive weight.
    Multiplicative,
}

/// Patches per frame: `rows × cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn check(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.rows == 0 || self.cols == 0 || h % self.rows != 0 || w % self.cols != 0 {
            return Err(Error::Config(format!(
                "{h}×{w} feature map cannot be split into a {}×{} patch grid",
                self.rows, self.cols
            )));
        }
        Ok((h / self.rows, w / self.cols))
    }
}

/// Validity of every key token, ordered `(clip, frame, patch_row, patch_col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub clips: usize,
    pub tokens_per_clip: usize,
    pub valid: Vec<bool>,
}

impl TokenMask {
    pub fn all_valid(clips: usize, tokens_per_clip: usize) -> Self {
        Self { clips, tokens_per_clip, valid: alloc::vec![true; clips * tokens_per_clip] }
    }

    /// Derive key validity from a full-resolution `(clips·frames)×1×H×W`
    /// mask (1 = valid). A token is invalid only when every pixel of its
    /// patch is corrupted.
    pub fn from_pixel_mask<T: Real>(mask: &Array<T>, clips: usize, grid: PatchGrid) -> Result<Self> {
        let s = mask.shape();
        if s.len() != 4 || s[1] != 1 || clips == 0 || s[0] % clips != 0 {
            return Err(Error::Contract(format!("pixel mask {:?} for {clips} clips", s)));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let (ph, pw) = grid.check(h, w)?;
        let mut valid = Vec::with_capacity(n * grid.patches());
        for f in 0..n {
            let plane = &mask.data()[f * h * w..(f + 1) * h * w];
            for a in 0..grid.rows {
                for b in 0..grid.cols {
                    let any_valid = (a * ph..(a + 1) * ph)
                        .any(|y| plane[y * w + b * pw..y * w + (b + 1) * pw].iter().any(|&v| v > T::zero()));
                    valid.push(any_valid);
                }
            }
        }
        Ok(Self { clips, tokens_per_clip: n / clips * grid.patches(), valid })
    }
}

/// `(clips·T)×c×h×w` → `clips×(T·n)×(c·h/r1·w/r2)`.
pub fn patchify<T: Real>(tape: &mut Tape<T>, x: Var, clips: usize, grid: PatchGrid) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || clips == 0 || s[0] % clips != 0 {
        return Err(Error::Contract(format!("patchify input {:?} for {clips} clips", s)));
    }
    let (frames, c, h, w) = (s[0] / clips, s[1], s[2], s[3]);
    let (ph, pw) = grid.check(h, w)?;
    let x = tape.reshape(x, &[clips, frames, c, grid.rows, ph, grid.cols, pw])?;
    let x = tape.permute(x, &[0, 1, 3, 5, 2, 4, 6])?;
    tape.reshape(x, &[clips, frames * grid.patches(), c * ph * pw])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    channels: usize,
    h: usize,
    w: usize,
    grid: PatchGrid,
) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    let (ph, pw) = grid.check(h, w)?;
    if s.len() != 3 || s[1] % grid.patches() != 0 || s[2] != channels * ph * pw {
        return Err(Error::Contract(format!("unpatchify tokens {:?} for c={channels}, {h}×{w}", s)));
    }
    let (clips, frames) = (s[0], s[1] / grid.patches());
    let x = tape.reshape(tokens, &[clips, frames, grid.rows, grid.cols, channels, ph, pw])?;
    let x = tape.permute(x, &[0, 1, 4, 2, 5, 3, 6])?;
    tape.reshape(x, &[clips * frames, channels, h, w])
}

pub struct Attention {
    /// `clips×tokens×len`.
    pub output: Var,
    /// `clips×tokens×tokens`, rows are queries.
    pub weights: Var,
}

/// Masked scaled dot-product attention over patch tokens.
pub fn compute_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &TokenMask,
    grid: PatchGrid,
    channels: usize,
    rule: MaskRule,
) -> Result<Attention> {
    let s = tape.shape(q).to_vec();
    if s.len() != 3 || tape.shape(k) != s.as_slice() || tape.shape(v) != s.as_slice() {
        return Err(Error::Contract(format!(
            "attention operands {:?}, {:?}, {:?}",
            s,
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let (clips, tokens) = (s[0], s[1]);
    if mask.valid.len() != clips * tokens || mask.clips != clips {
        return Err(Error::Contract(format!(
            "token mask covers {} tokens in {} clips, attention has {}×{}",
            mask.valid.len(),
            mask.clips,
            clips,
            tokens
        )));
    }
    let scale = 1.0 / num_traits::Float::sqrt((grid.patches() * channels) as f64);
    let scores = tape.matmul_t(q, k, false, true)?;
    let scores = tape.scale(scores, T::from_f64(scale))?;
    let key_masked = |idx: usize| {
        let (b, j) = (idx / (tokens * tokens), idx % tokens);
        !mask.valid[b * tokens + j]
    };
    let scores = match rule {
        MaskRule::Additive => {
            let fill: Vec<bool> = (0..clips * tokens * tokens).map(key_masked).collect();
            tape.mask_fill(scores, &fill, T::neg_infinity())?
        }
        MaskRule::Multiplicative => {
            let m = Array::from_fn(&[clips, tokens, tokens], |i| if key_masked(i) { T::zero() } else { T::one() });
            let m = tape.constant(m);
            tape.mul(scores, m)?
        }
    };
    let weights = tape.softmax(scores, 2)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// Parameters of one transformer block, including its depth projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub value_dw: Conv2d,
    pub out_proj: Conv2d,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
    pub depth_proj: Conv2d,
}

impl Block {
    pub fn new<T: Real>(name: &str, c: usize, expansion: usize, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        let pw = |n: &str, cin: usize, cout: usize| Conv2dSpec::new(format!("{name}.{n}"), cin, cout, 1).init(Init::Fan);
        Self {
            query: pw("query", c, c).build(store, rng),
            key: pw("key", c, c).build(store, rng),
            value: pw("value", c, c).build(store, rng),
            value_dw: Conv2dSpec::new(format!("{name}.value_dw"), c, c, 3).groups(c).init(Init::Fan).build(store, rng),
            out_proj: pw("out_proj", c, c).build(store, rng),
            ffn_in: pw("ffn_in", c, expansion * c).init(Init::Kaiming).build(store, rng),
            ffn_out: pw("ffn_out", expansion * c, c).build(store, rng),
            depth_proj: pw("depth_proj", c, c).build(store, rng),
        }
    }

    /// `Q = P_Q(f)`, `K = P_K(f)`, `V = P_V(f) + P'_V(f)`.
    pub fn project_qkv<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<(Var, Var, Var)> {
        let q = self.query.forward(tape, p, f)?;
        let k = self.key.forward(tape, p, f)?;
        let v = self.value.forward(tape, p, f)?;
        let v_dw = self.value_dw.forward(tape, p, f)?;
        let v = tape.add(v, v_dw)?;
        Ok((q, k, v))
    }

    /// Returns `(F^i, F^i_att)`.
    pub fn block_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        f_prev: Var,
        mask: &TokenMask,
        grid: PatchGrid,
        rule: MaskRule,
    ) -> Result<(Var, Var)> {
        let s = tape.shape(f_prev).to_vec();
        if s.len() != 4 {
            return Err(Error::Contract(format!("block input {:?}", s)));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let (q, k, v) = self.project_qkv(tape, p, f_prev)?;
        let qp = patchify(tape, q, mask.clips, grid)?;
        let kp = patchify(tape, k, mask.clips, grid)?;
        let vp = patchify(tape, v, mask.clips, grid)?;
        let att = compute_attention(tape, qp, kp, vp, mask, grid, c, rule)?;
        let f_att = unpatchify(tape, att.output, c, h, w, grid)?;
        let proj = self.out_proj.forward(tape, p, f_att)?;
        let mid = tape.add(f_prev, proj)?;
        let hidden = self.ffn_in.forward(tape, p, mid)?;
        let hidden = tape.relu(hidden)?;
        let out = self.ffn_out.forward(tape, p, hidden)?;
        let f_next = tape.add(mid, out)?;
        Ok((f_next, f_att))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stgde {
    pub blocks: Vec<Block>,
    pub depth_decoder: Decoder,
    pub grid: PatchGrid,
    pub rule: MaskRule,
}

pub struct StgdeOutput {
    /// `F^{N_s}`, input to the fusion stage.
    pub features: Var,
    /// `F^i_att` for every block, in order.
    pub attention: Vec<Var>,
    /// `(clips·T)×1×H×W` in `[0, 1]`.
    pub depth: Var,
}

impl Stgde {
    pub fn new<T: Real>(
        blocks: usize,
        base_channels: usize,
        expansion: usize,
        grid: PatchGrid,
        rule: MaskRule,
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
    ) -> Self {
        let c = 4 * base_channels;
        let blocks = (0..blocks)
            .map(|i| Block::new(&format!("stgde.block{i}"), c, expansion, store, rng))
            .collect();
        let depth_decoder = Decoder::new("stgde.depth_decoder", DecoderSpec { base_channels, out_channels: 1 }, store, rng);
        Self { blocks, depth_decoder, grid, rule }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var, mask: &TokenMask) -> Result<StgdeOutput> {
        let mut h = f;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, att) = block.block_forward(tape, p, h, mask, self.grid, self.rule)?;
            attention.push(att);
            h = next;
        }
        let depth = self.estimate_depth(tape, p, &attention)?;
        Ok(StgdeOutput { features: h, attention, depth })
    }

    /// `Dec_D(Σ_i P_D^i(F^i_att))`.
    pub fn estimate_depth<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f_att: &[Var]) -> Result<Var> {
        if f_att.len() != self.blocks.len() || f_att.is_empty() {
            return Err(Error::Contract(format!(
                "depth head needs {} attention maps, got {}",
                self.blocks.len(),
                f_att.len()
            )));
        }
        let aggregate = self.aggregate_attention(tape, p, f_att)?;
        self.depth_decoder.decode_frames(tape, p, aggregate)
    }

    /// `Σ_i P_D^i(F^i_att)`: the depth decoder's input.
    pub fn aggregate_attention<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f_att: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (block, &att) in self.blocks.iter().zip(f_att) {
            let projected = block.depth_proj.forward(tape, p, att)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, projected)?,
                None => projected,
            });
        }
        acc.ok_or_else(|| Error::Contract("no attention maps".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_grid_flattens_each_frame() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Array::from_fn(&[3, 2, 2, 2], |i| i as f64));
        let t = patchify(&mut tape, x, 1, PatchGrid::new(1, 1)).unwrap();
        assert_eq!(tape.shape(t), [1, 3, 8]);
        assert_eq!(tape.value(t).data(), tape.value(x).data());
    }

    #[test]
    fn two_by_two_grid_orders_patches_row_major() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Array::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = patchify(&mut tape, x, 1, PatchGrid::new(2, 2)).unwrap();
        assert_eq!(tape.shape(t), [1, 4, 1]);
        assert_eq!(tape.value(t).data(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn indivisible_grid_is_a_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Array::zeros(&[1, 1, 3, 4]));
        assert!(matches!(patchify(&mut tape, x, 1, PatchGrid::new(2, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn token_is_masked_only_when_its_whole_patch_is_corrupted() {
        // 1 frame, 4×4 pixels, 2×2 grid. Patch 0 fully corrupted, patch 1 has
        // one valid pixel left.
        let mut m = Array::<f64>::full(&[1, 1, 4, 4], 1.0);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (0, 3), (1, 2)] {
            m.data_mut()[y * 4 + x] = 0.0;
        }
        let mask = TokenMask::from_pixel_mask(&m, 1, PatchGrid::new(2, 2)).unwrap();
        assert_eq!(mask.valid, [false, true, true, true]);
    }

    #[test]
    fn estimate_depth_rejects_wrong_list_length() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(1);
        let s = Stgde::new(2, 1, 4, PatchGrid::new(1, 1), MaskRule::Additive, &mut store, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = tape.constant(Array::zeros(&[1, 4, 1, 1]));
        assert!(matches!(s.estimate_depth(&mut tape, &p, &[f]), Err(Error::Contract(_))));
    }
}
