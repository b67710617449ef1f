use super::{Array, Real};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of `x`:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every element `i`.
///
/// `f` must be deterministic; results for a non-deterministic `f` are
/// meaningless.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Array<T>) -> Result<T>,
    x: &Array<T>,
    eps: T,
) -> Result<Array<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Contract(alloc::format!("finite difference step must be positive, got {eps:?}")));
    }
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.shape());
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / two_eps;
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both
/// vanish.
pub fn relative_error<T: Real>(a: &Array<T>, b: &Array<T>) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = num_traits::Float::sqrt(f64::max(na, nb));
    if scale == 0.0 {
        return num_traits::Float::sqrt(diff);
    }
    num_traits::Float::sqrt(diff) / scale
}
