//! Row-major dense matrices and the float abstraction used by the model,
//! trainer, and sampler.
//!
//! Everything here is deliberately sequential and allocation-explicit: the
//! training loop owns one set of buffers and reuses them, so determinism
//! falls out of the structure instead of being bolted on. Matrix products
//! dispatch to the `gemm` crate; all other kernels are plain loops.

use gemm::Parallelism;

/// Float type the numeric core is generic over. Implemented for `f32`
/// (training and inference) and `f64` (gradient checking, reference paths).
///
/// `exp_fast`/`tanh_fast` trade the last few bits of accuracy for speed on
/// `f32`; the `f64` impl keeps exact libm semantics so finite-difference
/// checks are not polluted by approximation error.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp_fast(self) -> Self;
    fn tanh_fast(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        tanh_f32(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn maxs(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline]
    fn mins(self, other: Self) -> Self {
        f32::min(self, other)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp_fast(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn maxs(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline]
    fn mins(self, other: Self) -> Self {
        f64::min(self, other)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Fast `exp` for f32. Branch-free range reduction (round-to-even via the
/// 1.5*2^23 trick, so it vectorizes on baseline x86-64) plus a degree-6
/// polynomial. Relative error stays under 1e-6 on [-87, 88]; inputs outside
/// that range clamp, which is harmless for softmax terms that far below the
/// row max.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LO: f32 = -87.0;
    const HI: f32 = 88.0;
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23

    let x = x.clamp(LO, HI);
    let n = (x * LOG2E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;

    // exp(r) on |r| <= ln2/2 + rounding slack, Taylor through r^6.
    let p = 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;

    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

/// Fast `tanh` for f32 via `exp_f32`. Absolute error under 1e-6; saturates
/// exactly to +/-1 beyond |x| = 9.
#[inline]
pub fn tanh_f32(x: f32) -> f32 {
    let c = x.clamp(-9.0, 9.0);
    let t = exp_f32(2.0 * c);
    (t - 1.0) / (t + 1.0)
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data length mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// Reshape to new dimensions with the same element count.
    pub fn reshape(&mut self, rows: usize, cols: usize) {
        assert_eq!(rows * cols, self.data.len(), "reshape changes element count");
        self.rows = rows;
        self.cols = cols;
    }

    pub fn map_to_f64(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    /// self (m x k) * rhs (k x n) -> dst (m x n). `accumulate` adds into dst
    /// instead of overwriting it.
    pub fn matmul_into(&self, rhs: &Mat<T>, dst: &mut Mat<T>, accumulate: bool) {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        assert_eq!(dst.rows, self.rows, "dst rows differ");
        assert_eq!(dst.cols, rhs.cols, "dst cols differ");
        let (m, n, k) = (self.rows, rhs.cols, self.cols);
        unsafe {
            gemm_strided(
                m,
                n,
                k,
                dst.data.as_mut_ptr(),
                dst.cols as isize,
                1,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                rhs.data.as_ptr(),
                rhs.cols as isize,
                1,
                T::ONE,
                accumulate,
            );
        }
    }

    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        let mut dst = Mat::zeros(self.rows, rhs.cols);
        self.matmul_into(rhs, &mut dst, false);
        dst
    }

    /// self^T (cols x rows) * rhs (rows x n) -> dst (cols x n).
    pub fn matmul_tn_into(&self, rhs: &Mat<T>, dst: &mut Mat<T>, accumulate: bool) {
        assert_eq!(self.rows, rhs.rows, "inner dimensions differ");
        assert_eq!(dst.rows, self.cols, "dst rows differ");
        assert_eq!(dst.cols, rhs.cols, "dst cols differ");
        let (m, n, k) = (self.cols, rhs.cols, self.rows);
        unsafe {
            gemm_strided(
                m,
                n,
                k,
                dst.data.as_mut_ptr(),
                dst.cols as isize,
                1,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                rhs.data.as_ptr(),
                rhs.cols as isize,
                1,
                T::ONE,
                accumulate,
            );
        }
    }

    /// self (m x k) * rhs^T (k x n, stored n x k) -> dst (m x n).
    pub fn matmul_nt_into(&self, rhs: &Mat<T>, dst: &mut Mat<T>, accumulate: bool) {
        assert_eq!(self.cols, rhs.cols, "inner dimensions differ");
        assert_eq!(dst.rows, self.rows, "dst rows differ");
        assert_eq!(dst.cols, rhs.rows, "dst cols differ");
        let (m, n, k) = (self.rows, rhs.rows, self.cols);
        unsafe {
            gemm_strided(
                m,
                n,
                k,
                dst.data.as_mut_ptr(),
                dst.cols as isize,
                1,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                rhs.data.as_ptr(),
                1,
                rhs.cols as isize,
                T::ONE,
                accumulate,
            );
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

/// Raw strided matrix product: dst (m x n) = scale * lhs (m x k) * rhs
/// (k x n), or += when `accumulate`. Strides are (row, col) element
/// strides, so transposed operands are expressed by swapping a stride pair.
/// Used directly by attention, which multiplies per-head sub-blocks of
/// packed activation buffers without copying them out.
///
/// Safety: every pointer must cover the full strided extent of its operand.
#[allow(clippy::too_many_arguments)]
pub unsafe fn gemm_strided<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    dst: *mut T,
    dst_rs: isize,
    dst_cs: isize,
    lhs: *const T,
    lhs_rs: isize,
    lhs_cs: isize,
    rhs: *const T,
    rhs_rs: isize,
    rhs_cs: isize,
    scale: T,
    accumulate: bool,
) {
    let alpha = if accumulate { T::ONE } else { T::ZERO };
    gemm::gemm(
        m,
        n,
        k,
        dst,
        dst_cs,
        dst_rs,
        accumulate,
        lhs,
        lhs_cs,
        lhs_rs,
        rhs,
        rhs_cs,
        rhs_rs,
        alpha,
        scale,
        false,
        false,
        false,
        Parallelism::None,
    );
}

/// Index of the maximum element; first occurrence wins ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    assert!(!xs.is_empty());
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
