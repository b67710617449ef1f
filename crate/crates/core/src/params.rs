//! Named parameter tensors and the layers built on them.

use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{Array, ConvGeometry, Gradients, PadMode, Real, Tape, Var};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Array::cast).collect() }
    }

    /// Record every tensor on `tape`, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bindings { vars }
    }

    /// Every tensor concatenated into one vector, in store order.
    pub fn flatten(&self) -> Array<T> {
        let data: Vec<T> = self.values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let n = data.len();
        Array::new(&[n], data).expect("length matches")
    }

    /// Bindings whose tensors are consecutive slices of `flat`, a vector laid
    /// out as by [`ParamStore::flatten`].
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<Bindings> {
        if tape.shape(flat) != [self.scalar_count()] {
            return Err(Error::Contract(alloc::format!(
                "flat parameters {:?} for a store of {} scalars",
                tape.shape(flat),
                self.scalar_count()
            )));
        }
        let mut vars = Vec::with_capacity(self.values.len());
        let mut offset = 0;
        for v in &self.values {
            let piece = tape.slice(flat, 0, offset, v.len())?;
            vars.push(tape.reshape(piece, v.shape())?);
            offset += v.len();
        }
        Ok(Bindings { vars })
    }
}

/// Tape handles for every tensor of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn gradients<T: Real>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> Vec<Array<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(tape, v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-uniform for layers followed by a leaky ReLU (slope 0.2).
    Kaiming,
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Fan,
}

pub(crate) fn init_weight<T: Real>(rng: &mut SplitMix64, shape: &[usize], init: Init) -> Array<T> {
    let fan_in: usize = shape[1..].iter().product();
    let fan_in = fan_in.max(1) as f64;
    let bound = match init {
        Init::Kaiming => num_traits::Float::sqrt(6.0 / ((1.0 + 0.04) * fan_in)),
        Init::Fan => 1.0 / num_traits::Float::sqrt(fan_in),
    };
    Array::from_fn(shape, |_| T::from_f64(rng.uniform(-bound, bound)))
}

/// Grouped 2-D convolution with `same` padding for odd kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
}

pub struct Conv2dSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
    pub bias: bool,
    pub init: Init,
}

impl Conv2dSpec {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride: 1, groups: 1, pad_mode: PadMode::Replicate, bias: true, init: Init::Kaiming }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn build<T: Real>(self, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Conv2d {
        let cin_g = self.cin / self.groups.max(1);
        let shape = [self.cout, cin_g, self.kernel, self.kernel];
        let weight = store.add(alloc::format!("{}.weight", self.name), init_weight(rng, &shape, self.init));
        let bias = self.bias.then(|| store.add(alloc::format!("{}.bias", self.name), Array::zeros(&[self.cout])));
        Conv2d {
            weight,
            bias,
            geo: ConvGeometry::conv2d(self.stride, self.kernel / 2, self.groups, self.pad_mode),
        }
    }
}

impl Conv2d {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        let w = params.var(self.weight);
        let b = self.bias.map(|b| params.var(b));
        tape.conv2d(x, w, b, self.geo)
    }

    /// Weight and bias ids, in that order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        core::iter::once(self.weight).chain(self.bias)
    }
}
