use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use num_like::FloatOps;

/// Scalar element type of tensors. Implemented for `f64` (gradchecks, tests)
/// and `f32` (fast training).
pub trait Real:
    FloatOps
    + Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` with row-major `c` of shape `m x n`.
    /// `op(a)` is `m x k`; when `trans_a` is set, `a` is stored `k x m`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // logical matrix is rows x cols
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = strides(trans_a, m, k);
        let (rsb, csb) = strides(trans_b, k, n);
        // SAFETY: bounds asserted above; strides describe dense row-major storage.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
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

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = strides(trans_a, m, k);
        let (rsb, csb) = strides(trans_b, k, n);
        // SAFETY: bounds asserted above; strides describe dense row-major storage.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
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

mod num_like {
    use std::ops::{Add, Div, Mul, Neg, Sub};

    /// The handful of float operations the kernels need.
    pub trait FloatOps:
        Sized
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
        fn neg_infinity() -> Self;
    }

    macro_rules! impl_float_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                fn zero() -> Self {
                    0.0
                }
                fn one() -> Self {
                    1.0
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                fn neg_infinity() -> Self {
                    <$t>::NEG_INFINITY
                }
            }
        };
    }

    impl_float_ops!(f32);
    impl_float_ops!(f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        // a^T b = [[1,3],[2,4]] b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        // a b^T
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        let mut c32 = [1.0f32; 4];
        let a32 = [1.0f32, 2.0, 3.0, 4.0];
        let b32 = [5.0f32, 6.0, 7.0, 8.0];
        f32::gemm(false, false, 2, 2, 2, 1.0, &a32, &b32, 1.0, &mut c32);
        assert_eq!(c32, [20.0, 23.0, 44.0, 51.0]);
    }

    #[test]
    fn erf_values() {
        assert!((Real::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Real::erf(1.0f32) - 0.842_700_8).abs() < 1e-6);
    }
}
