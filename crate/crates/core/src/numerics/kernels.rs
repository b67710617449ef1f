//! Slice-level kernels behind the tape primitives.
//!
//! Convolutions of every rank go through one im2col + gemm path over
//! `N×C×D×H×W`; 2-D convolutions use `D = 1`.

use alloc::vec;
use alloc::vec::Vec;

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Out-of-range taps read the nearest edge value.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    /// Stride per spatial axis `(d, h, w)`.
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl ConvGeometry {
    pub fn conv2d(stride: usize, padding: usize, groups: usize, pad_mode: PadMode) -> Self {
        Self { stride: [1, stride, stride], padding: [0, padding, padding], groups, pad_mode }
    }

    pub fn conv3d(stride: [usize; 3], padding: [usize; 3], pad_mode: PadMode) -> Self {
        Self { stride, padding, groups: 1, pad_mode }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_extent(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding[axis];
        if padded < kernel || self.stride[axis] == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride[axis] + 1)
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Input index for every `(kernel tap, output position)` pair along one axis.
fn tap_table(
    input: usize,
    kernel: usize,
    output: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Vec<Option<usize>> {
    let mut table = Vec::with_capacity(kernel * output);
    for k in 0..kernel {
        for o in 0..output {
            let i = (o * stride + k) as isize - padding as isize;
            let idx = if i >= 0 && (i as usize) < input {
                Some(i as usize)
            } else {
                match mode {
                    PadMode::Zeros => None,
                    PadMode::Replicate => Some(i.clamp(0, input as isize - 1) as usize),
                }
            };
            table.push(idx);
        }
    }
    table
}

pub(crate) struct ConvPlan {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geo: ConvGeometry,
    tables: [Vec<Option<usize>>; 3],
}

impl ConvPlan {
    pub fn new(
        n: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        output: [usize; 3],
        geo: ConvGeometry,
    ) -> Self {
        let table = |a: usize| {
            tap_table(input[a], kernel[a], output[a], geo.stride[a], geo.padding[a], geo.pad_mode)
        };
        Self { n, cin, cout, input, kernel, output, geo, tables: [table(0), table(1), table(2)] }
    }

    fn cin_g(&self) -> usize {
        self.cin / self.geo.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.geo.groups
    }

    fn k_len(&self) -> usize {
        self.cin_g() * self.kernel.iter().product::<usize>()
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let plane = self.in_plane();
        let p = self.out_plane();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let xc = &x[c * plane..(c + 1) * plane];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut col[row * p..(row + 1) * p];
                        let mut q = 0;
                        for zd in 0..od {
                            let id = self.tables[0][a * od + zd];
                            for zh in 0..oh {
                                let ihh = self.tables[1][b * oh + zh];
                                match (id, ihh) {
                                    (Some(id), Some(ihh)) => {
                                        let base = (id * ih + ihh) * iw;
                                        let tw = &self.tables[2][e * ow..(e + 1) * ow];
                                        for (slot, iw_idx) in dst[q..q + ow].iter_mut().zip(tw) {
                                            *slot = match iw_idx {
                                                Some(i) => xc[base + i],
                                                None => T::zero(),
                                            };
                                        }
                                    }
                                    _ => dst[q..q + ow].fill(T::zero()),
                                }
                                q += ow;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], gx: &mut [T]) {
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let plane = self.in_plane();
        let p = self.out_plane();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let gc = &mut gx[c * plane..(c + 1) * plane];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &col[row * p..(row + 1) * p];
                        let mut q = 0;
                        for zd in 0..od {
                            let id = self.tables[0][a * od + zd];
                            for zh in 0..oh {
                                let ihh = self.tables[1][b * oh + zh];
                                if let (Some(id), Some(ihh)) = (id, ihh) {
                                    let base = (id * ih + ihh) * iw;
                                    let tw = &self.tables[2][e * ow..(e + 1) * ow];
                                    for (v, iw_idx) in src[q..q + ow].iter().zip(tw) {
                                        if let Some(i) = iw_idx {
                                            gc[base + i] = gc[base + i] + *v;
                                        }
                                    }
                                }
                                q += ow;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let (cin_g, cout_g, k, p) = (self.cin_g(), self.cout_g(), self.k_len(), self.out_plane());
        let pointwise = self.geo.is_pointwise(self.kernel);
        let mut out = vec![T::zero(); self.n * self.cout * p];
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..self.n {
            for g in 0..self.geo.groups {
                let x_off = (n * self.cin + g * cin_g) * self.in_plane();
                let xg = &x[x_off..x_off + cin_g * self.in_plane()];
                let cols: &[T] = if pointwise {
                    xg
                } else {
                    self.im2col(xg, &mut col);
                    &col
                };
                let wg = &w[g * cout_g * k..(g + 1) * cout_g * k];
                let o_off = (n * self.cout + g * cout_g) * p;
                T::gemm(cout_g, k, p, wg, false, cols, false, T::zero(), &mut out[o_off..o_off + cout_g * p]);
            }
            if let Some(b) = bias {
                for co in 0..self.cout {
                    let o_off = (n * self.cout + co) * p;
                    for v in &mut out[o_off..o_off + p] {
                        *v = *v + b[co];
                    }
                }
            }
        }
        out
    }

    /// Gradients with respect to input, weight and bias; each is computed only
    /// when requested.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        gout: &[T],
        need: [bool; 3],
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let (cin_g, cout_g, k, p) = (self.cin_g(), self.cout_g(), self.k_len(), self.out_plane());
        let pointwise = self.geo.is_pointwise(self.kernel);
        let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
        let mut gw = need[1].then(|| vec![T::zero(); w.len()]);
        let gb = need[2].then(|| {
            let mut gb = vec![T::zero(); self.cout];
            for n in 0..self.n {
                for (co, slot) in gb.iter_mut().enumerate() {
                    let off = (n * self.cout + co) * p;
                    *slot = gout[off..off + p].iter().fold(*slot, |acc, &v| acc + v);
                }
            }
            gb
        });
        if gx.is_none() && gw.is_none() {
            return (None, None, gb);
        }
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        let mut gcol = if gx.is_some() { vec![T::zero(); k * p] } else { Vec::new() };
        for n in 0..self.n {
            for g in 0..self.geo.groups {
                let x_off = (n * self.cin + g * cin_g) * self.in_plane();
                let x_len = cin_g * self.in_plane();
                let o_off = (n * self.cout + g * cout_g) * p;
                let gout_g = &gout[o_off..o_off + cout_g * p];
                let wg = &w[g * cout_g * k..(g + 1) * cout_g * k];
                if let Some(gw) = gw.as_mut() {
                    let xg = &x[x_off..x_off + x_len];
                    let cols: &[T] = if pointwise {
                        xg
                    } else {
                        self.im2col(xg, &mut col);
                        &col
                    };
                    let gwg = &mut gw[g * cout_g * k..(g + 1) * cout_g * k];
                    T::gemm(cout_g, p, k, gout_g, false, cols, true, T::one(), gwg);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxg = &mut gx[x_off..x_off + x_len];
                    if pointwise {
                        T::gemm(k, cout_g, p, wg, true, gout_g, false, T::one(), gxg);
                    } else {
                        T::gemm(k, cout_g, p, wg, true, gout_g, false, T::zero(), &mut gcol);
                        self.col2im(&gcol, gxg);
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `out` axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    let nd = out_shape.len();
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut counter = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < total {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the odometer over all but the innermost axis
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            counter[axis] += 1;
            base += src_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`. Rows whose entries are all `-inf` come out as zeros.
pub(crate) fn softmax<T: Real>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
            for j in 0..len {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    gx
}

/// Nearest-neighbour upsampling of the last two axes by `factor`.
pub(crate) fn upsample_nearest<T: Real>(data: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let planes: usize = shape[..nd - 2].iter().product();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let row = &src[(y / factor) * w..(y / factor + 1) * w];
            for (x, slot) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *slot = row[x / factor];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Real>(g: &[T], in_shape: &[usize], factor: usize) -> Vec<T> {
    let nd = in_shape.len();
    let (h, w) = (in_shape[nd - 2], in_shape[nd - 1]);
    let planes: usize = in_shape[..nd - 2].iter().product();
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let slot = &mut dst[(y / factor) * w + x / factor];
                *slot = *slot + src[y * ow + x];
            }
        }
    }
    gx
}
