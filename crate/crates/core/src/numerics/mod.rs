//! Dense row-major arrays and a reverse-mode tape over them.
//!
//! Axis order for image data is `N×C×H×W`; clips fold time into `N`. The
//! spatio-temporal discriminator uses `N×C×T×H×W`.

mod adam;
mod array;
mod finite_diff;
pub(crate) mod kernels;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Array;
pub use finite_diff::{finite_diff_grad, relative_error};
pub use kernels::{ConvGeometry, PadMode};
pub use tape::{Gradients, Tape, Var};

use core::fmt::Debug;

/// Scalar type the engine computes in. `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + core::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = op(a)·op(b) + beta·c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
    /// With `a_t` set, `a` is stored `k×m`; with `b_t`, `b` is stored `n×k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above guarantee every strided access
                // stays inside the three slices, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
