//! Scalar abstraction shared by every solver in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar the solvers are generic over: `f32` or `f64`.
///
/// Besides the usual `num_traits` bounds this carries a dense
/// matrix-multiply hook so the network kernels can dispatch to an
/// optimized GEMM for the concrete type.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A * B + beta * C` with explicit (row, column) strides.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must lie
    /// inside the corresponding buffer. Use [`gemm`] for a checked wrapper.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    );

    /// Converts an `f64` literal. Panics only if the value is not representable,
    /// which cannot happen for finite inputs with `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Branch-free hyperbolic tangent used by the network layers; loops over
    /// it auto-vectorize, unlike the libm call behind `Float::tanh`.
    fn act_tanh(self) -> Self;
}

/// `tanh` accurate to a few ulp: rational approximation below 0.625,
/// `1 - 2/(e^{2|x|} + 1)` above. NaN propagates.
#[inline(always)]
pub fn tanh_f64(x: f64) -> f64 {
    const P: [f64; 3] = [-9.643_991_794_250_522e-1, -9.928_772_310_019_186e1, -1.614_687_684_417_084_5e3];
    const Q: [f64; 3] = [1.128_116_784_916_329_3e2, 2.235_488_390_601_004_5e3, 4.844_063_053_251_255e3];
    let a = x.abs();
    let z = x * x;
    let small = x + x * z * (((P[0] * z + P[1]) * z + P[2]) / (((z + Q[0]) * z + Q[1]) * z + Q[2]));
    let e = exp_f64(if a < 40.0 { 2.0 * a } else { 80.0 });
    let big = 1.0 - 2.0 / (e + 1.0);
    let big = if x < 0.0 { -big } else { big };
    if a < 0.625 || x.is_nan() {
        small
    } else {
        big
    }
}

// exp on [-88, 88] via a Pade form on the reduced argument and an exponent
// bit shift.
#[inline(always)]
fn exp_f64(x: f64) -> f64 {
    const P: [f64; 3] = [1.261_771_930_748_105_9e-4, 3.029_944_077_074_419_6e-2, 1.0];
    const Q: [f64; 4] = [3.001_985_051_386_644_5e-6, 2.524_483_403_496_841e-3, 2.272_655_482_081_550_3e-1, 2.0];
    const C1: f64 = 6.931_457_519_531_25e-1;
    const C2: f64 = 1.428_606_820_309_417_2e-6;
    // round to nearest without a libm call
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let n = (x * std::f64::consts::LOG2_E + SHIFTER) - SHIFTER;
    let r = x - n * C1 - n * C2;
    let rr = r * r;
    let px = r * ((P[0] * rr + P[1]) * rr + P[2]);
    let qx = ((Q[0] * rr + Q[1]) * rr + Q[2]) * rr + Q[3];
    let y = 1.0 + 2.0 * (px / (qx - px));
    let scale = f64::from_bits(((n as i64 + 1023) as u64) << 52);
    y * scale
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                a_strides: (isize, isize),
                b: *const Self,
                b_strides: (isize, isize),
                beta: Self,
                c: *mut Self,
                c_strides: (isize, isize),
            ) {
                $gemm(
                    m,
                    k,
                    n,
                    alpha,
                    a,
                    a_strides.0,
                    a_strides.1,
                    b,
                    b_strides.0,
                    b_strides.1,
                    beta,
                    c,
                    c_strides.0,
                    c_strides.1,
                );
            }

            #[inline(always)]
            fn act_tanh(self) -> Self {
                tanh_f64(self as f64) as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Operand layout for [`gemm`]: a row-major `rows x cols` buffer, optionally
/// read transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatView<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let ld = self.cols as isize;
        if self.transposed {
            (1, ld)
        } else {
            (ld, 1)
        }
    }
}

/// Checked `C = alpha * op(A) * op(B) + beta * C`, `C` row-major `m x n`.
pub(crate) fn gemm<T: Real>(alpha: T, a: MatView<'_, T>, b: MatView<'_, T>, beta: T, c: &mut [T], n: usize) {
    let (m, k) = a.shape();
    let (kb, nb) = b.shape();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(n, nb, "output width mismatch");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: shapes and buffer lengths were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.strides(),
            b.data.as_ptr(),
            b.strides(),
            beta,
            c.as_mut_ptr(),
            (n as isize, 1),
        );
    }
}
