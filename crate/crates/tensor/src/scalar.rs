use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a tensor.
///
/// `f32` is used for training, `f64` for gradient checking.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// All pointers must be valid for the extents and strides given.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix layout of a GEMM operand: row-major `[rows, cols]`, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Use the stored row-major matrix as is.
    Normal { cols: usize },
    /// Use the transpose of a stored row-major matrix with `cols` columns.
    Transposed { cols: usize },
}

impl Layout {
    fn strides(self) -> (isize, isize) {
        match self {
            Layout::Normal { cols } => (cols as isize, 1),
            Layout::Transposed { cols } => (1, cols as isize),
        }
    }
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`, with `c` dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_layout: Layout,
    b: &[F],
    b_layout: Layout,
    beta: F,
    c: &mut [F],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_layout.strides();
    let (rsb, csb) = b_layout.strides();
    assert!(k == 0 || (m - 1) * rsa as usize + (k - 1) * (csa as usize) < a.len());
    assert!(k == 0 || (k - 1) * rsb as usize + (n - 1) * (csb as usize) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: extents and strides checked against the slice lengths above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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
