//! Slice-level numeric kernels shared by the tape's forward and backward rules.

use super::Element;

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    T::gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), c);
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable softmax of one row. Rows whose maximum sits at the
/// masking floor are written as zeros.
pub fn softmax_row<T: Element>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !(max > T::masked_row_threshold()) {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation, written as `x * sigmoid(2u)`.
pub fn gelu<T: Element>(x: T) -> T {
    let u = T::of(2.0 * SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    x * sigmoid(u)
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::of(2.0 * SQRT_2_OVER_PI);
    let s = sigmoid(c * (x + T::of(GELU_C) * x * x * x));
    let du = c * (T::one() + T::of(3.0 * GELU_C) * x * x);
    s + x * s * (T::one() - s) * du
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
