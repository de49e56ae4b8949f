use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type a tensor can hold. `f32` trains, `f64` verifies.
pub trait Element:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Additive mask value for blocked attention entries.
    const MASK_FLOOR: f64;
    /// Tag used in checkpoints and reports.
    const NAME: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c += a · b` over strided `m×k` and `k×n` operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]);

    /// Rows whose maximum logit is at or below this are treated as fully
    /// masked by softmax and produce zeros.
    fn masked_row_threshold() -> Self {
        Self::of(Self::MASK_FLOOR * 0.5)
    }
}

impl Element for f32 {
    const MASK_FLOOR: f64 = -1e9;
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]) {
        strided_check(m, k, n, a.len(), sa, b.len(), sb, c.len());
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}

impl Element for f64 {
    const MASK_FLOOR: f64 = -1e30;
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]) {
        strided_check(m, k, n, a.len(), sa, b.len(), sb, c.len());
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn strided_check(m: usize, k: usize, n: usize, la: usize, sa: (isize, isize), lb: usize, sb: (isize, isize), lc: usize) {
    let end = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(end(m, k, sa) <= la && end(k, n, sb) <= lb && m * n <= lc, "gemm operand too short");
}
