//! Batch sampling and the alternating discriminator/generator update.
//!
//! Every draw of iteration `i` comes from `SplitMix64::derive(seed ^
//! SAMPLER_SALT, i)`, so a batch is a pure function of the seed and the
//! iteration and a resumed run sees the same batches as an uninterrupted one.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig, TrainingConfig};
use crate::data::{generate_clip, generate_masks, Clip, MaskSpec, SyntheticScene};
use crate::ded::{loss_ded, loss_gen, rgbd, Discriminator};
use crate::losses::{combine, l1_loss, perceptual_loss, style_loss, total_generator_loss, FixedFeatureBank, LossTerms, LossVars};
use crate::model::{Generator, GeneratorOutput};
use crate::numerics::{AdamState, Array, Real, Tape, Var};
use crate::params::{Bindings, ParamStore};
use crate::rng::SplitMix64;
use crate::stgde::TokenMask;
use crate::{Error, Result};

pub const SAMPLER_SALT: u64 = 0x5A4D_504C_4552_0001;
const INIT_STREAM: u64 = 0;

/// One training clip with its depth, and optionally a fixed mask (otherwise
/// a fresh mask is drawn for every sample).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Clip,
    pub depth: Clip,
    pub mask: Option<Clip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub mask_spec: MaskSpec,
}

impl Dataset {
    /// `cfg.clips` synthetic clips, clip `i` drawn from scene seed
    /// `derive(scene_seed, i)`, with per-sample masks.
    pub fn synthetic(cfg: &DataConfig) -> Result<Self> {
        let mut samples = Vec::with_capacity(cfg.clips);
        for i in 0..cfg.clips {
            let scene = SyntheticScene::from_seed(SplitMix64::derive(cfg.scene_seed, i as u64).next_u64());
            let (frames, depth) = generate_clip(&scene, cfg.clip_frames, cfg.height, cfg.width)?;
            samples.push(Sample { frames, depth, mask: None });
        }
        Ok(Self { samples, mask_spec: cfg.mask.clone() })
    }
}

/// `B` clips of `T` frames stacked frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub clips: usize,
    pub frames: Clip,
    pub depth: Clip,
    pub masks: Clip,
    /// `(sample, frame indices)` per clip.
    pub indices: Vec<(usize, Vec<usize>)>,
}

/// `count` frame indices out of `len`: a consecutive run, or a sorted
/// uniformly random subset.
pub fn frame_indices(rng: &mut SplitMix64, len: usize, count: usize, consecutive: bool) -> Result<Vec<usize>> {
    if len < count {
        return Err(Error::Data(format!("clip of {len} frames cannot supply {count}")));
    }
    if consecutive {
        let start = rng.below(len - count + 1);
        return Ok((start..start + count).collect());
    }
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = i + rng.below(len - i);
        pool.swap(i, j);
    }
    let mut out = pool[..count].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Even iterations take consecutive frames, odd iterations random ones.
pub fn sample_batch(dataset: &Dataset, iteration: u64, seed: u64, cfg: &TrainingConfig) -> Result<Batch> {
    if dataset.samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut rng = SplitMix64::derive(seed ^ SAMPLER_SALT, iteration);
    let consecutive = iteration % 2 == 0;
    let (mut frames, mut depth, mut masks, mut indices) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch_size {
        let s = rng.below(dataset.samples.len());
        let sample = &dataset.samples[s];
        let idx = frame_indices(&mut rng, sample.frames.frames, cfg.frames, consecutive)?;
        frames.push(sample.frames.select(&idx)?);
        depth.push(sample.depth.select(&idx)?);
        let mask_seed = rng.next_u64();
        masks.push(match &sample.mask {
            Some(m) => m.select(&idx)?,
            None => {
                let spec = MaskSpec { seed: mask_seed, ..dataset.mask_spec.clone() };
                generate_masks(&spec, cfg.frames, sample.frames.height, sample.frames.width)?
            }
        });
        indices.push((s, idx));
    }
    Ok(Batch {
        clips: cfg.batch_size,
        frames: Clip::stack(&frames)?,
        depth: Clip::stack(&depth)?,
        masks: Clip::stack(&masks)?,
        indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub l_d: f64,
    pub l_i: f64,
    pub l_gen: f64,
    pub l_p: f64,
    pub l_s: f64,
    /// Weighted generator objective as optimised.
    pub total: f64,
    pub l_ded: f64,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms { l_d: self.l_d, l_i: self.l_i, l_gen: self.l_gen, l_p: self.l_p, l_s: self.l_s }
    }
}

/// Everything needed to resume training, as named tensors plus counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState<T> {
    pub iteration: u64,
    pub rng_state: u64,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    pub tensors: Vec<(String, Array<T>)>,
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub generator: Generator,
    pub gen_params: ParamStore<T>,
    pub discriminator: Discriminator<T>,
    pub ded_params: ParamStore<T>,
    pub gen_opt: AdamState<T>,
    pub ded_opt: AdamState<T>,
    pub bank: FixedFeatureBank<T>,
    pub iteration: u64,
}

struct Inputs<T> {
    masked: Array<T>,
    tokens: TokenMask,
    truth: Array<T>,
    depth: Array<T>,
}

fn finite_or_named(values: &[(&'static str, f64)]) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite { op: name }),
        None => Ok(()),
    }
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(config.seed, INIT_STREAM);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&config.model, &mut gen_params, &mut rng);
        let mut ded_params = ParamStore::new();
        let mut discriminator = Discriminator::new(&config.model.discriminator_channels, &mut ded_params, &mut rng)?;
        discriminator.warm_up(&ded_params, config.training.spectral_warmup);
        let gen_opt = AdamState::new(gen_params.values());
        let ded_opt = AdamState::new(ded_params.values());
        Ok(Self { config, generator, gen_params, discriminator, ded_params, gen_opt, ded_opt, bank: FixedFeatureBank::default(), iteration: 0 })
    }

    /// State of the sampler stream for the next iteration.
    pub fn rng_state(&self) -> u64 {
        SplitMix64::derive(self.config.seed ^ SAMPLER_SALT, self.iteration).state()
    }

    pub fn next_batch(&self, dataset: &Dataset) -> Result<Batch> {
        sample_batch(dataset, self.iteration, self.config.seed, &self.config.training)
    }

    fn inputs(&self, batch: &Batch) -> Result<Inputs<T>> {
        let masked = batch.frames.masked(&batch.masks)?.to_array();
        let tokens = TokenMask::from_pixel_mask(&batch.masks.to_array::<T>(), batch.clips, self.config.model.grid())?;
        Ok(Inputs { masked, tokens, truth: batch.frames.to_array(), depth: batch.depth.to_array() })
    }

    fn generate(&self, tape: &mut Tape<T>, inputs: &Inputs<T>, trainable: bool) -> Result<(Bindings, GeneratorOutput)> {
        let gp = self.gen_params.bind(tape, trainable);
        let x = tape.constant(inputs.masked.clone());
        let out = self.generator.forward(tape, &gp, x, &inputs.tokens)?;
        Ok((gp, out))
    }

    /// Generator losses on an existing forward pass, with the discriminator
    /// frozen.
    fn generator_losses(&self, tape: &mut Tape<T>, inputs: &Inputs<T>, out: &GeneratorOutput, clips: usize) -> Result<(LossVars, Var)> {
        let truth = tape.constant(inputs.truth.clone());
        let depth = tape.constant(inputs.depth.clone());
        let dp = self.ded_params.bind(tape, false);
        let fake = rgbd(tape, out.frames, out.depth, clips)?;
        let score = self.discriminator.discriminate(tape, &dp, fake)?;
        let vars = LossVars {
            l_d: l1_loss(tape, out.depth, depth, None)?.0,
            l_i: l1_loss(tape, out.frames, truth, None)?.0,
            l_gen: loss_gen(tape, score)?,
            l_p: perceptual_loss(tape, out.frames, truth, &self.bank)?,
            l_s: style_loss(tape, out.frames, truth, &self.bank)?,
        };
        let total = total_generator_loss(tape, &vars, &self.config.loss)?;
        Ok((vars, total))
    }

    fn ded_loss(&self, tape: &mut Tape<T>, dp: &Bindings, inputs: &Inputs<T>, fake_frames: Array<T>, fake_depth: Array<T>, clips: usize) -> Result<Var> {
        let truth = tape.constant(inputs.truth.clone());
        let depth = tape.constant(inputs.depth.clone());
        let ff = tape.constant(fake_frames);
        let fd = tape.constant(fake_depth);
        let real = rgbd(tape, truth, depth, clips)?;
        let fake = rgbd(tape, ff, fd, clips)?;
        let sr = self.discriminator.discriminate(tape, dp, real)?;
        let sf = self.discriminator.discriminate(tape, dp, fake)?;
        loss_ded(tape, sr, sf, self.config.training.hinge)
    }

    /// One Adam step of the discriminator on fixed generated samples;
    /// returns the loss before the step.
    fn discriminator_update(&mut self, inputs: &Inputs<T>, fake_frames: Array<T>, fake_depth: Array<T>, clips: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let dp = self.ded_params.bind(&mut tape, true);
        let loss = self.ded_loss(&mut tape, &dp, inputs, fake_frames, fake_depth, clips)?;
        let value = scalar(&tape, loss);
        finite_or_named(&[("l_ded", value)])?;
        let grads = tape.backward(loss)?;
        let g = dp.gradients(&tape, &grads);
        self.ded_opt.step(self.ded_params.values_mut(), &g, &self.config.optimizer.discriminator)?;
        Ok(value)
    }

    /// The weighted generator objective on `batch` under explicit generator
    /// bindings, with the discriminator frozen.
    pub fn objective(&self, tape: &mut Tape<T>, gp: &Bindings, batch: &Batch) -> Result<(LossVars, Var)> {
        let inputs = self.inputs(batch)?;
        let x = tape.constant(inputs.masked.clone());
        let out = self.generator.forward(tape, gp, x, &inputs.tokens)?;
        self.generator_losses(tape, &inputs, &out, batch.clips)
    }

    /// A discriminator step alone, against the current generator's output.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f64> {
        let inputs = self.inputs(batch)?;
        let mut tape = Tape::new();
        let (_, out) = self.generate(&mut tape, &inputs, false)?;
        let (ff, fd) = (tape.value(out.frames).clone(), tape.value(out.depth).clone());
        self.discriminator_update(&inputs, ff, fd, batch.clips)
    }

    /// Losses on `batch` without updating anything.
    pub fn evaluate(&self, batch: &Batch) -> Result<LossReport> {
        let inputs = self.inputs(batch)?;
        let mut tape = Tape::new();
        let (_, out) = self.generate(&mut tape, &inputs, false)?;
        let (vars, total) = self.generator_losses(&mut tape, &inputs, &out, batch.clips)?;
        let dp = self.ded_params.bind(&mut tape, false);
        let (ff, fd) = (tape.value(out.frames).clone(), tape.value(out.depth).clone());
        let l_ded = self.ded_loss(&mut tape, &dp, &inputs, ff, fd, batch.clips)?;
        Ok(self.report(&tape, &vars, total, scalar(&tape, l_ded)))
    }

    fn report(&self, tape: &Tape<T>, v: &LossVars, total: Var, l_ded: f64) -> LossReport {
        LossReport {
            iteration: self.iteration,
            l_d: scalar(tape, v.l_d),
            l_i: scalar(tape, v.l_i),
            l_gen: scalar(tape, v.l_gen),
            l_p: scalar(tape, v.l_p),
            l_s: scalar(tape, v.l_s),
            total: scalar(tape, total),
            l_ded,
        }
    }

    /// Advance the spectral estimates, step the discriminator on detached
    /// generator output, then step the generator on the weighted objective.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        self.discriminator.power_iteration(&self.ded_params);
        let inputs = self.inputs(batch)?;
        let mut tape = Tape::new();
        let (gp, out) = self.generate(&mut tape, &inputs, true)?;
        let (ff, fd) = (tape.value(out.frames).clone(), tape.value(out.depth).clone());
        let l_ded = self.discriminator_update(&inputs, ff, fd, batch.clips)?;
        let (vars, total) = self.generator_losses(&mut tape, &inputs, &out, batch.clips)?;
        let report = self.report(&tape, &vars, total, l_ded);
        let mut named: Vec<(&'static str, f64)> = report.terms().named().to_vec();
        named.push(("total", report.total));
        finite_or_named(&named)?;
        let grads = tape.backward(total)?;
        let g = gp.gradients(&tape, &grads);
        self.gen_opt.step(self.gen_params.values_mut(), &g, &self.config.optimizer.generator)?;
        self.iteration += 1;
        Ok(report)
    }

    /// `Ŷ` composited with the valid input pixels, for every frame of
    /// `batch`.
    pub fn inpaint(&self, batch: &Batch) -> Result<Clip> {
        let inputs = self.inputs(batch)?;
        let mut tape = Tape::new();
        let (_, out) = self.generate(&mut tape, &inputs, false)?;
        let pred = Clip::from_array(tape.value(out.frames))?;
        crate::inference::composite(&batch.frames, &batch.masks, &pred)
    }

    /// The weighted total of a report's terms under this trainer's weights.
    pub fn recombine(&self, report: &LossReport) -> f64 {
        combine(&report.terms(), &self.config.loss)
    }

    pub fn export_state(&self) -> TrainerState<T> {
        let mut tensors = Vec::new();
        for (n, v) in self.gen_params.names().iter().zip(self.gen_params.values()) {
            tensors.push((format!("gen/{n}"), v.clone()));
        }
        for (n, v) in self.ded_params.names().iter().zip(self.ded_params.values()) {
            tensors.push((format!("ded/{n}"), v.clone()));
        }
        for (i, layer) in self.discriminator.layers().enumerate() {
            tensors.push((format!("ded_sn/{i}.u"), layer.u.clone()));
            tensors.push((format!("ded_sn/{i}.v"), layer.v.clone()));
        }
        for (tag, opt, store) in [("gen", &self.gen_opt, &self.gen_params), ("ded", &self.ded_opt, &self.ded_params)] {
            for ((n, m), v) in store.names().iter().zip(&opt.first).zip(&opt.second) {
                tensors.push((format!("adam_{tag}/m/{n}"), m.clone()));
                tensors.push((format!("adam_{tag}/v/{n}"), v.clone()));
            }
        }
        TrainerState {
            iteration: self.iteration,
            rng_state: self.rng_state(),
            generator_steps: self.gen_opt.step,
            discriminator_steps: self.ded_opt.step,
            tensors,
        }
    }

    /// Restore a state exported from a trainer with the same configuration.
    pub fn import_state(&mut self, state: TrainerState<T>) -> Result<()> {
        let expected = self.export_state();
        if state.tensors.len() != expected.tensors.len() {
            return Err(Error::Data(format!("state has {} tensors, model needs {}", state.tensors.len(), expected.tensors.len())));
        }
        for ((n, v), (en, ev)) in state.tensors.iter().zip(&expected.tensors) {
            if n != en || v.shape() != ev.shape() {
                return Err(Error::Data(format!("state tensor {n} {:?} where {en} {:?} was expected", v.shape(), ev.shape())));
            }
        }
        let expected_rng = SplitMix64::derive(self.config.seed ^ SAMPLER_SALT, state.iteration).state();
        if state.rng_state != expected_rng {
            return Err(Error::Data("sampler state does not match seed and iteration".into()));
        }
        let mut it = state.tensors.into_iter().map(|(_, v)| v);
        let mut next = || it.next().expect("count checked above");
        for v in self.gen_params.values_mut() {
            *v = next();
        }
        for v in self.ded_params.values_mut() {
            *v = next();
        }
        for layer in self.discriminator.layers_mut() {
            layer.u = next();
            layer.v = next();
        }
        for opt in [&mut self.gen_opt, &mut self.ded_opt] {
            for i in 0..opt.first.len() {
                opt.first[i] = next();
                opt.second[i] = next();
            }
        }
        self.gen_opt.step = state.generator_steps;
        self.ded_opt.step = state.discriminator_steps;
        self.iteration = state.iteration;
        Ok(())
    }
}

impl From<&LossReport> for Vec<(String, f64)> {
    fn from(r: &LossReport) -> Self {
        let mut v: Vec<(String, f64)> = r.terms().named().iter().map(|(n, x)| (n.to_string(), *x)).collect();
        v.push(("total".into(), r.total));
        v.push(("l_ded".into(), r.l_ded));
        v
    }
}
