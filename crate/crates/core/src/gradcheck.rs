//! Backward-versus-central-difference checks in 64-bit.
//!
//! Every check draws a random micro instance per seed, reduces the output to
//! a scalar through a fixed random projection, and compares the tape
//! gradient with the central difference (`eps = 1e-6`) by norm-wise relative
//! error. Inputs of piecewise-linear ops are kept away from their kinks.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bmpcf::Bmpcf;
use crate::codec::{Decoder, DecoderSpec, Encoder, EncoderSpec};
use crate::config::RunConfig;
use crate::data::{generate_clip, MaskSpec, SyntheticScene};
use crate::ded::{loss_ded, loss_gen, Discriminator, HingeVariant};
use crate::losses::{gram, l1_loss, perceptual_loss, style_loss, FixedFeatureBank};
use crate::numerics::{finite_diff_grad, relative_error, Array, ConvGeometry, PadMode, Tape, Var};
use crate::params::{Bindings, ParamStore};
use crate::rng::SplitMix64;
use crate::stgde::{compute_attention, Block, MaskRule, PatchGrid, Stgde, TokenMask};
use crate::training::{sample_batch, Dataset, Sample, Trainer};
use crate::{Error, Result};

pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_SEEDS: u64 = 20;
const EPS: f64 = 1e-6;

type Objective = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// A scalar function of one input array.
pub struct Case {
    pub input: Array<f64>,
    pub objective: Objective,
}

pub struct Check {
    pub name: &'static str,
    pub build: fn(&mut SplitMix64) -> Result<Case>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error between the tape gradient and the central difference.
pub fn run_case(case: &Case) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(case.input.clone());
    let y = (case.objective)(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(&tape, x);
    let numeric = finite_diff_grad(
        |v| {
            let mut t = Tape::new();
            let c = t.constant(v.clone());
            let y = (case.objective)(&mut t, c)?;
            Ok(t.value(y).data()[0])
        },
        &case.input,
        EPS,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn run_check(check: &Check, seeds: u64) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = SplitMix64::derive(0x6752_4144_4348_4B00, seed);
        let case = (check.build)(&mut rng)?;
        let e = run_case(&case)?;
        if !e.is_finite() {
            return Err(Error::NonFinite { op: check.name });
        }
        worst = worst.max(e);
    }
    Ok(CheckReport { name: check.name.into(), seeds, max_rel_error: worst, passed: worst <= TOLERANCE })
}

pub fn run_suite(seeds: u64) -> Result<Vec<CheckReport>> {
    default_suite().iter().map(|c| run_check(c, seeds)).collect()
}

fn uniform(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    Array::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign.
fn off_kink(rng: &mut SplitMix64, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| {
        let m = rng.uniform(0.1, 1.0);
        if rng.next_u64() & 1 == 0 {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ R` with `R` drawn from a fixed seed.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let r = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(y, r)?;
    tape.sum(m)
}

fn dim(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Split `x` (flat) into consecutive pieces of the given shapes.
fn split(tape: &mut Tape<f64>, x: Var, shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = tape.slice(x, 0, offset, n)?;
        out.push(tape.reshape(piece, s)?);
        offset += n;
    }
    Ok(out)
}

fn flat_len(shapes: &[&[usize]]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

fn unary(rng: &mut SplitMix64, keep_off_kink: bool, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<Case> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
    let input = if keep_off_kink { off_kink(rng, &shape) } else { uniform(rng, &shape, -2.0, 2.0) };
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let y = op(t, x)?;
        project(t, y, seed)
    }) })
}

fn binary(rng: &mut SplitMix64, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<Case> {
    let shape = [2, dim(rng, 1, 3), dim(rng, 1, 4)];
    let input = uniform(rng, &shape, -2.0, 2.0);
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let a = t.slice(x, 0, 0, 1)?;
        let b = t.slice(x, 0, 1, 1)?;
        let y = op(t, a, b)?;
        project(t, y, seed)
    }) })
}

fn matmul_case(rng: &mut SplitMix64) -> Result<Case> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let batch = dim(rng, 0, 2);
    let (a_t, b_t) = (rng.next_u64() & 1 == 1, rng.next_u64() & 1 == 1);
    let a2 = if a_t { [k, m] } else { [m, k] };
    let b2 = if b_t { [n, k] } else { [k, n] };
    let (sa, sb): (Vec<usize>, Vec<usize>) = if batch == 0 {
        (a2.to_vec(), b2.to_vec())
    } else {
        ([&[batch][..], &a2].concat(), [&[batch][..], &b2].concat())
    };
    let input = uniform(rng, &[sa.iter().product::<usize>() + sb.iter().product::<usize>()], -1.0, 1.0);
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let p = split(t, x, &[&sa, &sb])?;
        let y = t.matmul_t(p[0], p[1], a_t, b_t)?;
        project(t, y, seed)
    }) })
}

fn shape4(rng: &mut SplitMix64) -> [usize; 4] {
    [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)]
}

fn reduce_axis(rng: &mut SplitMix64, mean: bool) -> Result<Case> {
    let shape = shape4(rng);
    let axis = rng.below(4);
    let input = uniform(rng, &shape, -1.0, 1.0);
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let y = if mean { t.mean_axis(x, axis)? } else { t.sum_axis(x, axis)? };
        project(t, y, seed)
    }) })
}

fn pad_mode(rng: &mut SplitMix64) -> PadMode {
    if rng.next_u64() & 1 == 0 {
        PadMode::Zeros
    } else {
        PadMode::Replicate
    }
}

/// Random grouped conv2d instance: `(x shape, w shape, bias len, geometry)`.
fn conv2d_instance(rng: &mut SplitMix64) -> ([usize; 4], [usize; 4], usize, ConvGeometry) {
    let groups = dim(rng, 1, 2);
    let cin = groups * dim(rng, 1, 2);
    let cout = groups * dim(rng, 1, 2);
    let k = if rng.next_u64() & 1 == 0 { 1 } else { 3 };
    let stride = dim(rng, 1, 2);
    let geo = ConvGeometry::conv2d(stride, k / 2, groups, pad_mode(rng));
    ([dim(rng, 1, 2), cin, dim(rng, 3, 5), dim(rng, 3, 5)], [cout, cin / groups, k, k], cout, geo)
}

/// Which conv2d operand the check differentiates.
#[derive(Clone, Copy)]
enum Operand {
    Input,
    Weight,
    Bias,
}

fn conv2d_case(rng: &mut SplitMix64, which: Operand) -> Result<Case> {
    let (xs, ws, nb, geo) = conv2d_instance(rng);
    let xa = uniform(rng, &xs, -1.0, 1.0);
    let wa = uniform(rng, &ws, -1.0, 1.0);
    let ba = uniform(rng, &[nb], -1.0, 1.0);
    let seed = rng.next_u64();
    let input = match which {
        Operand::Input => xa.clone(),
        Operand::Weight => wa.clone(),
        Operand::Bias => ba.clone(),
    };
    Ok(Case { input, objective: Box::new(move |t, v| {
        let (x, w, b) = match which {
            Operand::Input => (v, t.constant(wa.clone()), t.constant(ba.clone())),
            Operand::Weight => (t.constant(xa.clone()), v, t.constant(ba.clone())),
            Operand::Bias => (t.constant(xa.clone()), t.constant(wa.clone()), v),
        };
        let y = t.conv2d(x, w, Some(b), geo)?;
        project(t, y, seed)
    }) })
}

fn conv3d_case(rng: &mut SplitMix64, which: Operand) -> Result<Case> {
    let (cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 2));
    let xs = [1, cin, dim(rng, 2, 3), dim(rng, 3, 4), dim(rng, 3, 4)];
    let ws = [cout, cin, 3, 3, 3];
    let s = dim(rng, 1, 2);
    let geo = ConvGeometry::conv3d([1, s, s], [1, 1, 1], pad_mode(rng));
    let xa = uniform(rng, &xs, -1.0, 1.0);
    let wa = uniform(rng, &ws, -1.0, 1.0);
    let ba = uniform(rng, &[cout], -1.0, 1.0);
    let seed = rng.next_u64();
    let input = match which {
        Operand::Input => xa.clone(),
        Operand::Weight => wa.clone(),
        Operand::Bias => ba.clone(),
    };
    Ok(Case { input, objective: Box::new(move |t, v| {
        let (x, w, b) = match which {
            Operand::Input => (v, t.constant(wa.clone()), t.constant(ba.clone())),
            Operand::Weight => (t.constant(xa.clone()), v, t.constant(ba.clone())),
            Operand::Bias => (t.constant(xa.clone()), t.constant(wa.clone()), v),
        };
        let y = t.conv3d(x, w, Some(b), geo)?;
        project(t, y, seed)
    }) })
}

/// A module check over either its input or all of its parameters.
fn module_case(
    input: Array<f64>,
    store: ParamStore<f64>,
    wrt_params: bool,
    seed: u64,
    forward: impl Fn(&mut Tape<f64>, &Bindings, Var) -> Result<Var> + 'static,
) -> Case {
    if wrt_params {
        Case { input: store.flatten(), objective: Box::new(move |t, v| {
            let p = store.bind_flat(t, v)?;
            let x = t.constant(input.clone());
            let y = forward(t, &p, x)?;
            project(t, y, seed)
        }) }
    } else {
        Case { input, objective: Box::new(move |t, v| {
            let p = store.bind(t, false);
            let y = forward(t, &p, v)?;
            project(t, y, seed)
        }) }
    }
}

fn encoder_case(rng: &mut SplitMix64, wrt_params: bool) -> Result<Case> {
    let mut store = ParamStore::new();
    let cin = dim(rng, 1, 3);
    let enc = Encoder::new("enc", EncoderSpec { in_channels: cin, base_channels: 1 }, &mut store, rng);
    let shape = [dim(rng, 1, 2), cin, 8, 4 * dim(rng, 1, 2)];
    let input = uniform(rng, &shape, 0.0, 1.0);
    Ok(module_case(input, store, wrt_params, rng.next_u64(), move |t, p, x| enc.encode_frames(t, p, x)))
}

fn decoder_case(rng: &mut SplitMix64, wrt_params: bool) -> Result<Case> {
    let mut store = ParamStore::new();
    let out = dim(rng, 1, 3);
    let dec = Decoder::new("dec", DecoderSpec { base_channels: 1, out_channels: out }, &mut store, rng);
    let shape = [1, 4, dim(rng, 1, 2), dim(rng, 1, 2)];
    let input = uniform(rng, &shape, -1.0, 1.0);
    Ok(module_case(input, store, wrt_params, rng.next_u64(), move |t, p, x| dec.decode_frames(t, p, x)))
}

fn random_token_mask(rng: &mut SplitMix64, clips: usize, tokens: usize) -> TokenMask {
    TokenMask { clips, tokens_per_clip: tokens, valid: (0..clips * tokens).map(|_| rng.below(4) != 0).collect() }
}

fn attention_case(rng: &mut SplitMix64, rule: MaskRule) -> Result<Case> {
    let grid = PatchGrid::new(dim(rng, 1, 2), dim(rng, 1, 2));
    let clips = dim(rng, 1, 2);
    let tokens = dim(rng, 1, 3) * grid.patches();
    let c = dim(rng, 1, 3);
    let len = c * dim(rng, 1, 2);
    let mask = random_token_mask(rng, clips, tokens);
    let s = [clips, tokens, len];
    let input = uniform(rng, &[3 * clips * tokens * len], -1.0, 1.0);
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let p = split(t, x, &[&s, &s, &s])?;
        let a = compute_attention(t, p[0], p[1], p[2], &mask, grid, c, rule)?;
        project(t, a.output, seed)
    }) })
}

fn block_case(rng: &mut SplitMix64, wrt_params: bool) -> Result<Case> {
    let mut store = ParamStore::new();
    let c = 4;
    let block = Block::new("block", c, 2, &mut store, rng);
    let grid = PatchGrid::new(2, 2);
    let frames = dim(rng, 1, 2);
    let mask = random_token_mask(rng, 1, frames * 4);
    let input = uniform(rng, &[frames, c, 4, 4], -1.0, 1.0);
    Ok(module_case(input, store, wrt_params, rng.next_u64(), move |t, p, x| {
        let (next, att) = block.block_forward(t, p, x, &mask, grid, MaskRule::Additive)?;
        // Both outputs leave the block; probe them together.
        let n = t.reshape(next, &[t.value(next).len()])?;
        let a = t.reshape(att, &[t.value(att).len()])?;
        t.concat(&[n, a], 0)
    }))
}

fn depth_head_case(rng: &mut SplitMix64) -> Result<Case> {
    let mut store = ParamStore::new();
    let blocks = dim(rng, 1, 3);
    let stgde = Stgde::new(blocks, 1, 2, PatchGrid::new(1, 1), MaskRule::Additive, &mut store, rng);
    let s = [1, 4, 2, 2];
    let shapes: Vec<&[usize]> = (0..blocks).map(|_| &s[..]).collect();
    let input = uniform(rng, &[flat_len(&shapes)], -1.0, 1.0);
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let shapes: Vec<&[usize]> = (0..blocks).map(|_| &s[..]).collect();
        let parts = split(t, x, &shapes)?;
        let p = store.bind(t, false);
        let d = stgde.estimate_depth(t, &p, &parts)?;
        project(t, d, seed)
    }) })
}

fn bmpcf_case(rng: &mut SplitMix64, wrt_params: bool) -> Result<Case> {
    let mut store = ParamStore::new();
    let kernel = if rng.next_u64() & 1 == 0 { 1 } else { 3 };
    let b = Bmpcf::new(1, kernel, &mut store, rng);
    let frames = dim(rng, 1, 2);
    let vs = [frames, 4, 2, 2];
    let ds = [frames, 1, 8, 8];
    let mut input = uniform(rng, &[flat_len(&[&vs, &ds])], -1.0, 1.0);
    for v in &mut input.data_mut()[flat_len(&[&vs])..] {
        *v = 0.5 * (*v + 1.0);
    }
    Ok(module_case(input, store, wrt_params, rng.next_u64(), move |t, p, x| {
        let parts = split(t, x, &[&vs, &ds])?;
        b.forward(t, p, parts[0], parts[1])
    }))
}

fn ded_case(rng: &mut SplitMix64, wrt_params: bool) -> Result<Case> {
    let mut store = ParamStore::new();
    let mut d = Discriminator::new(&[2, 2], &mut store, rng)?;
    d.warm_up(&store, 5);
    let shape = [dim(rng, 1, 2), 4, 2, 4, 4];
    let input = uniform(rng, &shape, 0.0, 1.0);
    Ok(module_case(input, store, wrt_params, rng.next_u64(), move |t, p, x| d.discriminate(t, p, x)))
}

fn hinge_case(rng: &mut SplitMix64) -> Result<Case> {
    let n = dim(rng, 1, 4);
    let variant = if rng.next_u64() & 1 == 0 { HingeVariant::AsPrinted } else { HingeVariant::Standard };
    // Scores sit at least 0.1 away from every hinge point (−1, 0, 1).
    let input = Array::from_fn(&[2 * n], |_| {
        let base = [-1.5, -0.5, 0.5, 1.5][rng.below(4)];
        base + rng.uniform(-0.4, 0.4)
    });
    Ok(Case { input, objective: Box::new(move |t, x| {
        let r = t.slice(x, 0, 0, n)?;
        let f = t.slice(x, 0, n, n)?;
        loss_ded(t, r, f, variant)
    }) })
}

fn loss_gen_case(rng: &mut SplitMix64) -> Result<Case> {
    let n = dim(rng, 1, 4);
    let input = uniform(rng, &[n], -2.0, 2.0);
    Ok(Case { input, objective: Box::new(loss_gen) })
}

/// `pred` = input, `target` = input minus offsets bounded away from zero.
fn frame_pair(rng: &mut SplitMix64, shape: &[usize]) -> (Array<f64>, Array<f64>) {
    let pred = uniform(rng, shape, 0.0, 1.0);
    let offsets = off_kink(rng, shape);
    (pred, offsets)
}

fn l1_case(rng: &mut SplitMix64) -> Result<Case> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
    let (input, offsets) = frame_pair(rng, &shape);
    let target = Array::new(&shape, input.data().iter().zip(offsets.data()).map(|(a, b)| a - b).collect())?;
    let region = if rng.next_u64() & 1 == 0 { None } else { Some(Array::from_fn(&shape, |_| if rng.below(3) == 0 { 0.0 } else { 1.0 })) };
    Ok(Case { input, objective: Box::new(move |t, x| {
        let y = t.constant(target.clone());
        Ok(l1_loss(t, x, y, region.as_ref())?.0)
    }) })
}

fn bank_case(rng: &mut SplitMix64, style: bool) -> Result<Case> {
    let shape = [dim(rng, 1, 2), 3, 4 * dim(rng, 1, 2), 4 * dim(rng, 1, 2)];
    let input = uniform(rng, &shape, 0.0, 1.0);
    let target = uniform(rng, &shape, 0.0, 1.0);
    let bank = FixedFeatureBank::<f64>::default();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let y = t.constant(target.clone());
        if style {
            style_loss(t, x, y, &bank)
        } else {
            perceptual_loss(t, x, y, &bank)
        }
    }) })
}

fn gram_case(rng: &mut SplitMix64) -> Result<Case> {
    let shape = shape4(rng);
    let input = uniform(rng, &shape, -1.0, 1.0);
    let seed = rng.next_u64();
    Ok(Case { input, objective: Box::new(move |t, x| {
        let g = gram(t, x)?;
        project(t, g, seed)
    }) })
}

/// Micro run configuration: one block, `C = 1`, 2-frame 8×8 clips.
pub fn micro_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..Default::default() };
    cfg.model.blocks = 1;
    cfg.model.base_channels = 1;
    cfg.model.ffn_expansion = 2;
    cfg.model.discriminator_channels = alloc::vec![2, 2];
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.data.clip_frames = 2;
    cfg.data.clips = 1;
    cfg.training.batch_size = 1;
    cfg.training.frames = 2;
    cfg.training.spectral_warmup = 5;
    cfg
}

fn objective_case(rng: &mut SplitMix64) -> Result<Case> {
    let cfg = micro_config(rng.next_u64());
    let (frames, depth) = generate_clip(&SyntheticScene::from_seed(rng.next_u64()), 2, 8, 8)?;
    let ds = Dataset {
        samples: alloc::vec![Sample { frames, depth, mask: None }],
        mask_spec: MaskSpec { seed: 0, fraction: 0.1, blobs: [1, 2], bars: [0, 0], max_drift: 0.05 },
    };
    let batch = sample_batch(&ds, rng.below(2) as u64, cfg.seed, &cfg.training)?;
    let trainer = Trainer::<f64>::new(cfg)?;
    // Biases start at zero and corrupted pixels enter as zeros, so at the
    // initial point every masked pre-activation sits on a ReLU kink.
    let mut input = trainer.gen_params.flatten();
    for v in input.data_mut() {
        *v += rng.uniform(-0.05, 0.05);
    }
    Ok(Case { input, objective: Box::new(move |t, v| {
        let gp = trainer.gen_params.bind_flat(t, v)?;
        Ok(trainer.objective(t, &gp, &batch)?.1)
    }) })
}

pub fn default_suite() -> Vec<Check> {
    macro_rules! check {
        ($name:literal, $f:expr) => {
            Check { name: $name, build: $f }
        };
    }
    alloc::vec![
        check!("add", |r| binary(r, Tape::add)),
        check!("sub", |r| binary(r, Tape::sub)),
        check!("mul", |r| binary(r, Tape::mul)),
        check!("scale", |r| unary(r, false, |t, x| t.scale(x, -1.7))),
        check!("add_scalar", |r| unary(r, false, |t, x| t.add_scalar(x, 0.3))),
        check!("mul_scalar_var", |r| {
            let n = dim(r, 1, 6);
            let input = uniform(r, &[n + 1], -2.0, 2.0);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let s = t.slice(x, 0, 0, 1)?;
                let a = t.slice(x, 0, 1, n)?;
                let y = t.mul_scalar_var(a, s)?;
                project(t, y, seed)
            }) })
        }),
        check!("recip", |r| {
            let n = dim(r, 1, 6);
            let input = Array::from_fn(&[n], |_| if r.next_u64() & 1 == 0 { r.uniform(0.5, 2.0) } else { -r.uniform(0.5, 2.0) });
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let y = t.recip(x)?;
                project(t, y, seed)
            }) })
        }),
        check!("relu", |r| unary(r, true, Tape::relu)),
        check!("leaky_relu", |r| unary(r, true, |t, x| t.leaky_relu(x, 0.2))),
        check!("sigmoid", |r| unary(r, false, Tape::sigmoid)),
        check!("abs", |r| unary(r, true, Tape::abs)),
        check!("sum", |r| unary(r, false, Tape::sum)),
        check!("mean", |r| unary(r, false, Tape::mean)),
        check!("sum_axis", |r| reduce_axis(r, false)),
        check!("mean_axis", |r| reduce_axis(r, true)),
        check!("matmul", matmul_case),
        check!("reshape", |r| unary(r, false, |t, x| {
            let n = t.value(x).len();
            t.reshape(x, &[n, 1])
        })),
        check!("permute", |r| {
            let shape = shape4(r);
            let mut perm = [0, 1, 2, 3];
            for i in 0..4 {
                let j = i + r.below(4 - i);
                perm.swap(i, j);
            }
            let input = uniform(r, &shape, -1.0, 1.0);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let y = t.permute(x, &perm)?;
                project(t, y, seed)
            }) })
        }),
        check!("concat", |r| {
            let shape = shape4(r);
            let axis = r.below(4);
            let input = uniform(r, &shape, -1.0, 1.0);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let sq = t.mul(x, x)?;
                let y = t.concat(&[x, sq, x], axis)?;
                project(t, y, seed)
            }) })
        }),
        check!("slice", |r| {
            let shape = shape4(r);
            let axis = r.below(4);
            let len = 1 + r.below(shape[axis]);
            let start = r.below(shape[axis] - len + 1);
            let input = uniform(r, &shape, -1.0, 1.0);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let y = t.slice(x, axis, start, len)?;
                project(t, y, seed)
            }) })
        }),
        check!("softmax", |r| {
            let shape = shape4(r);
            let axis = r.below(4);
            let input = uniform(r, &shape, -2.0, 2.0);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let y = t.softmax(x, axis)?;
                project(t, y, seed)
            }) })
        }),
        check!("masked_softmax", |r| {
            let (rows, cols) = (dim(r, 1, 4), dim(r, 1, 4));
            let mask: Vec<bool> = (0..rows * cols).map(|_| r.below(3) == 0).collect();
            let input = uniform(r, &[rows, cols], -2.0, 2.0);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let m = t.mask_fill(x, &mask, f64::NEG_INFINITY)?;
                let y = t.softmax(m, 1)?;
                project(t, y, seed)
            }) })
        }),
        check!("conv2d_input", |r| conv2d_case(r, Operand::Input)),
        check!("conv2d_weight", |r| conv2d_case(r, Operand::Weight)),
        check!("conv2d_bias", |r| conv2d_case(r, Operand::Bias)),
        check!("conv3d_input", |r| conv3d_case(r, Operand::Input)),
        check!("conv3d_weight", |r| conv3d_case(r, Operand::Weight)),
        check!("conv3d_bias", |r| conv3d_case(r, Operand::Bias)),
        check!("upsample_nearest", |r| {
            let shape = shape4(r);
            let input = uniform(r, &shape, -1.0, 1.0);
            let factor = dim(r, 1, 3);
            let seed = r.next_u64();
            Ok(Case { input, objective: Box::new(move |t, x| {
                let y = t.upsample_nearest(x, factor)?;
                project(t, y, seed)
            }) })
        }),
        check!("codec_encoder", |r| encoder_case(r, false)),
        check!("codec_encoder_params", |r| encoder_case(r, true)),
        check!("codec_decoder", |r| decoder_case(r, false)),
        check!("codec_decoder_params", |r| decoder_case(r, true)),
        check!("stgde_attention", |r| attention_case(r, MaskRule::Additive)),
        check!("stgde_attention_multiplicative", |r| attention_case(r, MaskRule::Multiplicative)),
        check!("stgde_block", |r| block_case(r, false)),
        check!("stgde_block_params", |r| block_case(r, true)),
        check!("stgde_depth_head", depth_head_case),
        check!("bmpcf", |r| bmpcf_case(r, false)),
        check!("bmpcf_params", |r| bmpcf_case(r, true)),
        check!("ded", |r| ded_case(r, false)),
        check!("ded_params", |r| ded_case(r, true)),
        check!("loss_ded", hinge_case),
        check!("loss_gen", loss_gen_case),
        check!("l1_loss", l1_case),
        check!("gram", gram_case),
        check!("perceptual_loss", |r| bank_case(r, false)),
        check!("style_loss", |r| bank_case(r, true)),
        check!("generator_objective_params", objective_case),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_wrong_gradient_is_caught() {
        // abs with its gradient replaced by the identity: f(x) = Σ|x| but the
        // case reports d/dx Σx. Built by hand from two objectives.
        let input = Array::from_f64(&[3], &[-1.0, 0.5, -0.25]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = tape.sum(x).unwrap();
        let analytic = tape.backward(y).unwrap().get_or_zeros(&tape, x);
        let numeric = finite_diff_grad(|v| Ok(v.data().iter().map(|a| a.abs()).sum()), &input, EPS).unwrap();
        assert!(relative_error(&analytic, &numeric) > TOLERANCE);
    }

    #[test]
    fn every_check_runs_on_one_seed() {
        for c in default_suite() {
            let r = run_check(&c, 1).unwrap();
            assert!(r.passed, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
