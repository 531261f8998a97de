//! Scalar element abstraction and the matrix-multiply kernel dispatch.

use std::fmt::{Debug, Display};

/// Scalars a tensor can hold: `f32` for training runs, `f64` for gradient
/// checks and numeric oracles. Everything else in the crate is generic over
/// this trait.
pub trait Element: num_traits::Float + Display + Debug + Default + 'static {
    /// Precision name as spelled on the CLI (`f32` / `f64`).
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C ← α·A·B + β·C with explicit element strides, so transposed operands
    /// are views (swapped strides), never copies.
    ///
    /// # Safety
    /// The pointers must be valid for the m×k, k×n and m×n extents implied by
    /// the strides; C must not alias A or B.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// C ← A·B + β·C on row-major slices. `trans_*` marks an operand stored as
/// the transpose of the shape it plays in the product; only its strides flip.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs buffer does not match {m}x{k}");
    assert_eq!(b.len(), k * n, "rhs buffer does not match {k}x{n}");
    assert_eq!(c.len(), m * n, "out buffer does not match {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // Degenerate product is the zero matrix; keep the β·C part.
        for v in c.iter_mut() {
            *v = beta * *v;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
