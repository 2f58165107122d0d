//! Plain slice kernels shared by the tape and by inference-only callers.
//!
//! All products accumulate in a fixed loop order, so row-parallel and serial
//! execution produce bit-identical results.

use rayon::prelude::*;

use crate::Scalar;

/// Below this many multiply-adds a product is never split across threads.
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// `out[m×q] += a[m×p] · b[p×q]`
pub fn matmul_acc<T: Scalar>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    p: usize,
    q: usize,
    parallel: bool,
) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    if q == 0 {
        return;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * q..(k + 1) * q];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    };
    if parallel && m * p * q >= PARALLEL_MIN_WORK {
        out.par_chunks_mut(q).enumerate().for_each(row);
    } else {
        out.chunks_mut(q).enumerate().for_each(row);
    }
}

/// `out[m×q] += a[m×p] · b[q×p]ᵀ`
pub fn matmul_nt_acc<T: Scalar>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    p: usize,
    q: usize,
    parallel: bool,
) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(out.len(), m * q);
    if q == 0 {
        return;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * p..(j + 1) * p];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *o += s;
        }
    };
    if parallel && m * p * q >= PARALLEL_MIN_WORK {
        out.par_chunks_mut(q).enumerate().for_each(row);
    } else {
        out.chunks_mut(q).enumerate().for_each(row);
    }
}

/// `out[m×q] += a[p×m]ᵀ · b[p×q]`
pub fn matmul_tn_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    for k in 0..p {
        let a_row = &a[k * m..(k + 1) * m];
        let b_row = &b[k * q..(k + 1) * q];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out[i * q..(i + 1) * q];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * q];
    matmul_acc(&mut out, a, b, m, p, q, false);
    out
}

pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * q];
    matmul_nt_acc(&mut out, a, b, m, p, q, false);
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of `x·σ(x)`.
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `log(1 + eˣ)` without overflow for large `|x|`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dot product of two equal-length slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm clamped below at `eps`.
pub fn clamped_norm<T: Scalar>(x: &[T], eps: T) -> T {
    dot(x, x).sqrt().max(eps)
}
