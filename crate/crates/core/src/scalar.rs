use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type of every array in the crate.
///
/// Implemented for `f32` and `f64`. The matrix product is dispatched to the
/// matching `matrixmultiply` kernel, and the error function (needed by the
/// exact GELU) to `libm`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Machine-appropriate step for central finite differences.
    const FD_STEP: f64;

    fn erf(self) -> Self;

    /// `c = alpha * a @ b + beta * c` with arbitrary element strides.
    ///
    /// # Safety contract
    /// The caller guarantees the slices cover every index addressed by the
    /// given dimensions and strides; this is checked with debug assertions.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("value representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs()
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:ident, $erf:path, $step:expr) => {
        impl Scalar for $t {
            const FD_STEP: f64 = $step;

            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                if k > 0 {
                    assert!(max_offset(m, k, rsa, csa) < a.len());
                    assert!(max_offset(k, n, rsb, csb) < b.len());
                }
                assert!(max_offset(m, n, rsc, csc) < c.len());
                // SAFETY: bounds of all three operands were asserted above and
                // `c` is uniquely borrowed.
                unsafe {
                    matrixmultiply::$kernel(
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm, libm::erff, 1e-2);
impl_scalar!(f64, dgemm, libm::erf, 1e-5);
