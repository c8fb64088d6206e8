//! Plain-slice numeric kernels shared by the graph ops and the
//! graph-free decoding path.

use crate::tensor::{c, Scalar};

/// `out (+)= a[m×k] · b[k×n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`, giving `m×n`.
pub fn gemm_a_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, giving `k×n`.
pub fn gemm_at_b<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row vector times matrix: `x[k] · w[k×n]`.
pub fn vecmat<T: Scalar>(x: &[T], w: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    gemm(x, w, &mut out, 1, x.len(), n, true);
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GeLU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let s = c::<T>((2.0 / std::f64::consts::PI).sqrt());
    let u = s * (x + c::<T>(GELU_K) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = c::<T>((2.0 / std::f64::consts::PI).sqrt());
    let u = s * (x + c::<T>(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = s * (T::one() + c::<T>(3.0 * GELU_K) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Inverse of softplus, used to place the initial step size.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// RMS normalisation of one row; returns the reciprocal RMS.
#[inline]
pub fn rms_norm_row<T: Scalar>(x: &[T], w: &[T], eps: T, out: &mut [T]) -> T {
    let n = c::<T>(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let r = T::one() / (ms + eps).sqrt();
    for ((o, &v), &wv) in out.iter_mut().zip(x).zip(w) {
        *o = v * r * wv;
    }
    r
}
