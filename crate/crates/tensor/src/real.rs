use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A strided, read-only view of a matrix operand.
#[doc(hidden)]
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub(crate) fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix, seen as `cols x rows`.
    pub(crate) fn trans(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

/// Floating point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    #[doc(hidden)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

/// Products with at most this many multiply-adds bypass the blocked kernel.
const SMALL_GEMM: usize = 4096;

/// `c = a * b + beta * c` with `c` row-major `m x n`.
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    accumulate: bool,
    c: &mut [T],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m * k * n <= SMALL_GEMM {
        // Packing overhead dominates for tiny products; a direct loop is faster.
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            if !accumulate {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
            for p in 0..k {
                let av = a.data[i * a.rs + p * a.cs];
                for (j, out) in row.iter_mut().enumerate() {
                    *out += av * b.data[p * b.rs + j * b.cs];
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, a, b, beta, c);
}

macro_rules! impl_real {
    ($t:ty, $bits:expr, $kernel:path) => {
        impl Real for $t {
            const BITS: u32 = $bits;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: &mut [Self],
            ) {
                // SAFETY: operand extents were checked against the slice
                // lengths in `gemm`, strides are non-negative.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr(),
                        b.rs as isize,
                        b.cs as isize,
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

impl_real!(f32, 32, matrixmultiply::sgemm);
impl_real!(f64, 64, matrixmultiply::dgemm);
