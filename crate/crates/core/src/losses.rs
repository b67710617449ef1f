//! Reconstruction, perceptual and style terms and the weighted generator
//! objective.
//!
//! Perceptual and style terms are measured in the feature space of a frozen,
//! seed-generated three-level convolutional pyramid (strides 1, 2 and 4)
//! rather than a pretrained network.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{Array, ConvGeometry, PadMode, Real, Tape, Var};
use crate::params::{init_weight, Init};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Seed of the default [`FixedFeatureBank`].
pub const FEATURE_BANK_SEED: u64 = 0x5EED_FEA7_0BA4_C000;
pub const FEATURE_BANK_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub lambda_gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_d: 0.1, lambda_p: 0.1, lambda_s: 250.0, lambda_i: 1.0, lambda_gen: 0.01 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda_d: 0.0, lambda_p: 0.0, lambda_s: 0.0, lambda_i: 0.0, lambda_gen: 0.0 }
    }
}

/// Individual generator terms as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_d: f64,
    pub l_i: f64,
    pub l_gen: f64,
    pub l_p: f64,
    pub l_s: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("l_d", self.l_d), ("l_i", self.l_i), ("l_gen", self.l_gen), ("l_p", self.l_p), ("l_s", self.l_s)]
    }
}

/// `λ_D L_D + λ_I L_I + λ_GEN L_GEN + λ_P L_P + λ_S L_S`.
pub fn combine(t: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_d * t.l_d + w.lambda_i * t.l_i + w.lambda_gen * t.l_gen + w.lambda_p * t.l_p + w.lambda_s * t.l_s
}

/// The generator terms as tape scalars.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_d: Var,
    pub l_i: Var,
    pub l_gen: Var,
    pub l_p: Var,
    pub l_s: Var,
}

/// Weighted sum of the terms on the tape, in the same order as [`combine`].
pub fn total_generator_loss<T: Real>(tape: &mut Tape<T>, t: &LossVars, w: &LossWeights) -> Result<Var> {
    let terms = [(t.l_d, w.lambda_d), (t.l_i, w.lambda_i), (t.l_gen, w.lambda_gen), (t.l_p, w.lambda_p), (t.l_s, w.lambda_s)];
    let mut acc: Option<Var> = None;
    for (v, lambda) in terms {
        let s = tape.scale(v, T::from_f64(lambda))?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.expect("five terms"))
}

/// Mean absolute error, restricted to elements where `region` is nonzero.
/// The flag is set when the region is empty, in which case the loss is 0.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, region: Option<&Array<T>>) -> Result<(Var, bool)> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(crate::error::dim_err!("l1_loss", "{:?} vs {:?}", tape.shape(pred), tape.shape(target)));
    }
    let d = tape.sub(pred, target)?;
    let d = tape.abs(d)?;
    match region {
        None => Ok((tape.mean(d)?, false)),
        Some(m) => {
            if m.shape() != tape.shape(pred) {
                return Err(crate::error::dim_err!("l1_loss", "region {:?} vs {:?}", m.shape(), tape.shape(pred)));
            }
            let weights = m.map(|v| if v != T::zero() { T::one() } else { T::zero() });
            let count = weights.data().iter().filter(|&&v| v != T::zero()).count();
            let mv = tape.constant(weights);
            let d = tape.mul(d, mv)?;
            let s = tape.sum(d)?;
            if count == 0 {
                return Ok((tape.scale(s, T::zero())?, true));
            }
            Ok((tape.scale(s, T::from_f64(1.0 / count as f64))?, false))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedFeatureBank<T> {
    pub weights: Vec<Array<T>>,
    pub geometry: Vec<ConvGeometry>,
}

impl<T: Real> FixedFeatureBank<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut cin = 3;
        let mut weights = Vec::new();
        let mut geometry = Vec::new();
        for (i, &cout) in FEATURE_BANK_CHANNELS.iter().enumerate() {
            let w: Array<f64> = init_weight(&mut rng, &[cout, cin, 3, 3], Init::Kaiming);
            weights.push(w.cast());
            let stride = if i == 0 { 1 } else { 2 };
            geometry.push(ConvGeometry::conv2d(stride, 1, 1, PadMode::Zeros));
            cin = cout;
        }
        Self { weights, geometry }
    }

    /// Features of `N×3×H×W` frames at every level.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, &geo) in self.weights.iter().zip(&self.geometry) {
            let wv = tape.constant(w.clone());
            h = tape.conv2d(h, wv, None, geo)?;
            h = tape.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl<T: Real> Default for FixedFeatureBank<T> {
    fn default() -> Self {
        Self::new(FEATURE_BANK_SEED)
    }
}

fn level_mean<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::from_f64(1.0 / terms.len() as f64))
}

fn check_frames<T: Real>(tape: &Tape<T>, pred: Var, target: Var, op: &'static str) -> Result<()> {
    let s = tape.shape(pred);
    if s.len() != 4 || s[1] != 3 || s != tape.shape(target) {
        return Err(Error::Dimension { op, detail: alloc::format!("{:?} vs {:?}", s, tape.shape(target)) });
    }
    Ok(())
}

/// Mean over levels of the mean absolute feature difference.
pub fn perceptual_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, bank: &FixedFeatureBank<T>) -> Result<Var> {
    check_frames(tape, pred, target, "perceptual_loss")?;
    let fp = bank.features(tape, pred)?;
    let ft = bank.features(tape, target)?;
    let mut terms = Vec::with_capacity(fp.len());
    for (a, b) in fp.into_iter().zip(ft) {
        terms.push(l1_loss(tape, a, b, None)?.0);
    }
    level_mean(tape, &terms)
}

/// Per-frame Gram matrices `N×C×C` of `N×C×H×W` features, each entry divided
/// by `C·H·W`.
pub fn gram<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(crate::error::dim_err!("gram", "expected N×C×H×W, got {:?}", s));
    }
    let hw = s[2] * s[3];
    let x = tape.reshape(f, &[s[0], s[1], hw])?;
    let g = tape.matmul_t(x, x, false, true)?;
    tape.scale(g, T::from_f64(1.0 / (s[1] * hw) as f64))
}

/// Mean over levels of the mean absolute Gram-matrix difference.
pub fn style_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, bank: &FixedFeatureBank<T>) -> Result<Var> {
    check_frames(tape, pred, target, "style_loss")?;
    let fp = bank.features(tape, pred)?;
    let ft = bank.features(tape, target)?;
    let mut terms = Vec::with_capacity(fp.len());
    for (a, b) in fp.into_iter().zip(ft) {
        let ga = gram(tape, a)?;
        let gb = gram(tape, b)?;
        terms.push(l1_loss(tape, ga, gb, None)?.0);
    }
    level_mean(tape, &terms)
}
