//! RGB-D discriminator with spectrally normalised 3-D convolutions, and the
//! hinge losses that train it.
//!
//! Input clips are `B×4×T×H×W` (three colour channels then depth). Six
//! 3×3×3 blocks, stride 2 in space from the second block on, each followed
//! by a leaky ReLU, feed a 1×1×1 score head; the score of a clip is the mean
//! of its patch scores.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{Array, ConvGeometry, PadMode, Real, Tape, Var};
use crate::params::{init_weight, Bindings, Init, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::{Error, Result};

pub const DEFAULT_CHANNELS: [usize; 6] = [16, 32, 64, 64, 64, 64];
const SIGMA_FLOOR: f64 = 1e-12;

/// Fake-sample term of the discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeVariant {
    /// `relu(1 - real) + relu(fake)`.
    #[default]
    AsPrinted,
    /// `relu(1 - real) + relu(1 + fake)`.
    Standard,
}

/// A 3-D convolution whose weight is divided by its leading singular value,
/// estimated by power iteration with persisted singular vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SnConv3d<T> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geo: ConvGeometry,
    /// Left singular vector estimate, `Cout`.
    pub u: Array<T>,
    /// Right singular vector estimate, `Cin·k³`.
    pub v: Array<T>,
}

fn normalize(v: &mut [f64]) {
    let n = num_traits::Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `(rows, cols)` of a conv weight viewed as a matrix.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

impl<T: Real> SnConv3d<T> {
    fn new(name: &str, cin: usize, cout: usize, k: usize, stride: [usize; 3], store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        let shape = [cout, cin, k, k, k];
        let weight = store.add(format!("{name}.weight"), init_weight(rng, &shape, Init::Kaiming));
        let bias = store.add(format!("{name}.bias"), Array::zeros(&[cout]));
        let (rows, cols) = matrix_dims(&shape);
        let mut u: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        normalize(&mut u);
        let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        normalize(&mut v);
        let pad = k / 2;
        Self {
            weight,
            bias,
            geo: ConvGeometry::conv3d(stride, [pad; 3], PadMode::Zeros),
            u: Array::from_f64(&[rows], &u).expect("sized above"),
            v: Array::from_f64(&[cols], &v).expect("sized above"),
        }
    }

    /// One power-iteration step: `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖`.
    pub fn power_iteration(&mut self, weight: &Array<T>) {
        let (rows, cols) = matrix_dims(weight.shape());
        let w = weight.data();
        let u: Vec<f64> = self.u.data().iter().map(|x| x.as_f64()).collect();
        let mut v = alloc::vec![0.0; cols];
        for (r, &ur) in u.iter().enumerate() {
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wv.as_f64() * ur;
            }
        }
        normalize(&mut v);
        let mut u = alloc::vec![0.0; rows];
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a.as_f64() * b).sum();
        }
        normalize(&mut u);
        self.u = Array::from_f64(&[rows], &u).expect("sized above");
        self.v = Array::from_f64(&[cols], &v).expect("sized above");
    }

    /// `uᵀ W v` for the current estimates.
    pub fn sigma(&self, weight: &Array<T>) -> f64 {
        let (rows, cols) = matrix_dims(weight.shape());
        let w = weight.data();
        (0..rows)
            .map(|r| {
                let wv: f64 = w[r * cols..(r + 1) * cols].iter().zip(self.v.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                self.u.data()[r].as_f64() * wv
            })
            .sum()
    }

    /// `W / σ(W)` on the tape, with `σ = uᵀWv` differentiated through `W`.
    /// A weight with vanishing `σ` (e.g. all zeros) is used as is.
    fn normalized_weight(&self, tape: &mut Tape<T>, w: Var) -> Result<Var> {
        let shape = tape.shape(w).to_vec();
        let (rows, cols) = matrix_dims(&shape);
        let w2 = tape.reshape(w, &[rows, cols])?;
        let v = tape.constant(self.v.clone().reshaped(&[cols, 1])?);
        let u = tape.constant(self.u.clone().reshaped(&[rows, 1])?);
        let wv = tape.matmul(w2, v)?;
        let sigma = tape.matmul_t(u, wv, true, false)?;
        if tape.value(sigma).data()[0].as_f64() <= SIGMA_FLOOR {
            return Ok(w);
        }
        let inv = tape.recip(sigma)?;
        tape.mul_scalar_var(w, inv)
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let w = self.normalized_weight(tape, p.var(self.weight))?;
        tape.conv3d(x, w, Some(p.var(self.bias)), self.geo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub blocks: Vec<SnConv3d<T>>,
    pub head: SnConv3d<T>,
}

impl<T: Real> Discriminator<T> {
    /// `channels` lists the output width of every block.
    pub fn new(channels: &[usize], store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        let mut cin = 4;
        let mut blocks = Vec::with_capacity(channels.len());
        for (i, &cout) in channels.iter().enumerate() {
            let s = if i == 0 { 1 } else { 2 };
            blocks.push(SnConv3d::new(&format!("ded.block{i}"), cin, cout, 3, [1, s, s], store, rng));
            cin = cout;
        }
        let head = SnConv3d::new("ded.head", cin, 1, 1, [1, 1, 1], store, rng);
        Ok(Self { blocks, head })
    }

    pub fn layers(&self) -> impl Iterator<Item = &SnConv3d<T>> {
        self.blocks.iter().chain(core::iter::once(&self.head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut SnConv3d<T>> {
        self.blocks.iter_mut().chain(core::iter::once(&mut self.head))
    }

    /// Advance every layer's singular-vector estimates once.
    pub fn power_iteration(&mut self, store: &ParamStore<T>) {
        for layer in self.layers_mut() {
            let w = store.get(layer.weight);
            layer.power_iteration(w);
        }
    }

    /// Warm the singular-vector estimates up with `steps` iterations.
    pub fn warm_up(&mut self, store: &ParamStore<T>, steps: usize) {
        for _ in 0..steps {
            self.power_iteration(store);
        }
    }

    /// One unbounded score per clip, shape `[B]`.
    pub fn discriminate(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != 4 {
            return Err(Error::Contract(format!("discriminator expects B×4×T×H×W, got {:?}", s)));
        }
        let slope = T::from_f64(crate::codec::LEAKY_SLOPE);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
            h = tape.leaky_relu(h, slope)?;
        }
        let h = self.head.forward(tape, p, h)?;
        let rest: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[s[0], rest])?;
        tape.mean_axis(h, 1)
    }
}

/// Build `B×4×T×H×W` RGB-D clips from `(B·T)×3×H×W` frames and
/// `(B·T)×1×H×W` depth.
pub fn rgbd<T: Real>(tape: &mut Tape<T>, frames: Var, depth: Var, clips: usize) -> Result<Var> {
    let fs = tape.shape(frames).to_vec();
    let ds = tape.shape(depth).to_vec();
    if fs.len() != 4 || ds.len() != 4 || fs[1] != 3 || ds[1] != 1 || fs[0] != ds[0] || fs[2..] != ds[2..] || clips == 0 || fs[0] % clips != 0 {
        return Err(Error::Contract(format!("cannot form RGB-D clips from {:?} and {:?}", fs, ds)));
    }
    let t = fs[0] / clips;
    let x = tape.concat(&[frames, depth], 1)?;
    let x = tape.reshape(x, &[clips, t, 4, fs[2], fs[3]])?;
    tape.permute(x, &[0, 2, 1, 3, 4])
}

/// Discriminator loss over a batch of real and generated scores.
pub fn loss_ded<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var, variant: HingeVariant) -> Result<Var> {
    let one = T::one();
    let r = tape.scale(real, -one)?;
    let r = tape.add_scalar(r, one)?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = match variant {
        HingeVariant::AsPrinted => fake,
        HingeVariant::Standard => tape.add_scalar(fake, one)?,
    };
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// Generator adversarial loss: `-mean(fake)`.
pub fn loss_gen<T: Real>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    let m = tape.mean(fake)?;
    tape.scale(m, -T::one())
}

/// [`loss_ded`] on plain scores.
pub fn loss_ded_value(real: &[f64], fake: &[f64], variant: HingeVariant) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(Array::from_f64(&[real.len()], real)?);
    let f = tape.constant(Array::from_f64(&[fake.len()], fake)?);
    let l = loss_ded(&mut tape, r, f, variant)?;
    Ok(tape.value(l).data()[0])
}

/// [`loss_gen`] on plain scores.
pub fn loss_gen_value(fake: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Array::from_f64(&[fake.len()], fake)?);
    let l = loss_gen(&mut tape, f)?;
    Ok(tape.value(l).data()[0])
}
