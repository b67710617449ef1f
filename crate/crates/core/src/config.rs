//! Run configuration. Every section rejects unknown keys and fills missing
//! ones from defaults.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::MaskSpec;
use crate::ded::{HingeVariant, DEFAULT_CHANNELS};
use crate::losses::LossWeights;
use crate::numerics::AdamConfig;
use crate::stgde::{MaskRule, PatchGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer blocks `N_s`.
    pub blocks: usize,
    /// Base channel count `C`; the latent has `4C` channels.
    pub base_channels: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub ffn_expansion: usize,
    /// Spatial size of the paired-channel fusion kernel (3 or 1).
    pub fusion_kernel: usize,
    pub mask_rule: MaskRule,
    pub discriminator_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            base_channels: 8,
            patch_rows: 2,
            patch_cols: 2,
            ffn_expansion: 4,
            fusion_kernel: 3,
            mask_rule: MaskRule::Additive,
            discriminator_channels: DEFAULT_CHANNELS.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.patch_rows, self.patch_cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per synthetic clip.
    pub clip_frames: usize,
    /// Synthetic clips in the training set.
    pub clips: usize,
    pub scene_seed: u64,
    pub mask: MaskSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, clip_frames: 20, clips: 4, scene_seed: 1, mask: MaskSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Frames per training sample.
    pub frames: usize,
    pub hinge: HingeVariant,
    /// Power iterations run on every discriminator weight at initialisation.
    pub spectral_warmup: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { iterations: 3000, batch_size: 4, frames: 5, hinge: HingeVariant::AsPrinted, spectral_warmup: 30, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Target frames per window.
    pub window: usize,
    /// Reference frames sampled per window.
    pub references: usize,
    /// Reference neighbourhood radius in frames.
    pub radius: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { window: 5, references: 10, radius: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub inference: InferenceConfig,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        positive("model.blocks", m.blocks)?;
        positive("model.base_channels", m.base_channels)?;
        positive("model.ffn_expansion", m.ffn_expansion)?;
        positive("training.batch_size", self.training.batch_size)?;
        positive("training.frames", self.training.frames)?;
        positive("inference.window", self.inference.window)?;
        positive("data.clips", self.data.clips)?;
        if m.fusion_kernel % 2 == 0 {
            return Err(Error::Config("model.fusion_kernel must be odd".into()));
        }
        if m.discriminator_channels.is_empty() || m.discriminator_channels.contains(&0) {
            return Err(Error::Config("model.discriminator_channels must list positive widths".into()));
        }
        let (h, w) = (self.data.height, self.data.width);
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("frame size {h}×{w} must be positive multiples of 4")));
        }
        m.grid().check(h / 4, w / 4)?;
        if self.data.clip_frames < self.training.frames {
            return Err(Error::Config(format!(
                "data.clip_frames {} is shorter than training.frames {}",
                self.data.clip_frames, self.training.frames
            )));
        }
        for (name, w) in
            [("lambda_d", self.loss.lambda_d), ("lambda_p", self.loss.lambda_p), ("lambda_s", self.loss.lambda_s), ("lambda_i", self.loss.lambda_i), ("lambda_gen", self.loss.lambda_gen)]
        {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative")));
            }
        }
        for (name, a) in [("generator", self.optimizer.generator), ("discriminator", self.optimizer.discriminator)] {
            let ok = a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0;
            if !ok {
                return Err(Error::Config(format!("optimizer.{name} has out-of-range settings")));
            }
        }
        if !(0.0..0.5).contains(&self.data.mask.fraction) {
            return Err(Error::Config("data.mask.fraction must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}
