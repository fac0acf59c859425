//! Plain slice kernels shared by the tape and the gradient-free helpers.

use crate::scalar::{dot, Scalar};

const NB: usize = 16;
const MR: usize = 4;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Each output accumulates over `k` in order; columns are processed in
/// register-sized blocks.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    // SAFETY (both branches): the feature was just detected. FMA is never
    // enabled, so every path rounds identically to the portable one.
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            return unsafe { matmul_acc_avx512(a, b, out, m, k, n) };
        }
        if std::is_x86_feature_detected!("avx2") {
            return unsafe { matmul_acc_avx2(a, b, out, m, k, n) };
        }
    }
    matmul_acc_body(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_acc_avx512<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    matmul_acc_body(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    matmul_acc_body(a, b, out, m, k, n)
}

#[inline(always)]
fn matmul_acc_body<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let a = &a[..m * k];
    let b = &b[..k * n];
    let out = &mut out[..m * n];
    let mut i = 0;
    // Four output rows at a time share each loaded block of `b`.
    while i + MR <= m {
        let mut j = 0;
        while j + NB <= n {
            let mut acc = [[T::zero(); NB]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NB]);
            }
            for p in 0..k {
                let br: &[T; NB] = b[p * n + j..p * n + j + NB].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for t in 0..NB {
                        row[t] += av * br[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NB].copy_from_slice(row);
            }
            j += NB;
        }
        for r in i..i + MR {
            tail_cols(a, b, out, r, j, k, n);
        }
        i += MR;
    }
    for r in i..m {
        let mut j = 0;
        while j + NB <= n {
            let mut acc = [T::zero(); NB];
            acc.copy_from_slice(&out[r * n + j..r * n + j + NB]);
            for p in 0..k {
                let av = a[r * k + p];
                let br = &b[p * n + j..p * n + j + NB];
                for t in 0..NB {
                    acc[t] += av * br[t];
                }
            }
            out[r * n + j..r * n + j + NB].copy_from_slice(&acc);
            j += NB;
        }
        tail_cols(a, b, out, r, j, k, n);
    }
}

#[inline(always)]
fn tail_cols<T: Scalar>(a: &[T], b: &[T], out: &mut [T], r: usize, from: usize, k: usize, n: usize) {
    for jj in from..n {
        let mut acc = out[r * n + jj];
        for p in 0..k {
            acc += a[r * k + p] * b[p * n + jj];
        }
        out[r * n + jj] = acc;
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * *bv;
            }
        }
    }
}

/// Numerically stable softmax of `x / temperature`, written into `out`.
pub fn softmax_into<T: Scalar>(x: &[T], temperature: T, out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = ((*v - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = x.iter().map(|v| (*v - max).exp()).sum();
    max + total.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU, evaluated as `x·σ(2u)` (identical to `½x(1 + tanh u)`,
/// without a libm `tanh` call).
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalizes one row; returns `1/sqrt(var + eps)` and writes the normalized values.
pub fn normalize_row<T: Scalar>(x: &[T], eps: T, xhat: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for (h, v) in xhat.iter_mut().zip(x) {
        *h = (*v - mean) * inv_std;
    }
    inv_std
}

/// Column-wise mean of a row-major `[rows × cols]` block, summed in row order.
pub fn mean_rows<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for r in 0..rows {
        for (a, e) in acc.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *a += *e;
        }
    }
    let n = T::from_usize(rows).unwrap();
    for a in acc.iter_mut() {
        *a /= n;
    }
    acc
}
