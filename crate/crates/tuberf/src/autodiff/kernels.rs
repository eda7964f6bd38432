//! Numeric kernels backing the tape ops.
//!
//! All kernels are deterministic for any worker count: parallel work is split
//! into fixed-size chunks keyed by element index, never by thread id, and
//! partial results are combined in chunk order.

use rayon::prelude::*;

const PAR_CHUNK: usize = 16_384;
/// Below this element count the rayon dispatch overhead dominates.
const PAR_MIN: usize = 32_768;

/// C[m,n] += A[m,k] * B[k,n], row-major. `beta` 0 overwrites C.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Row-block parallelism; each output row is produced by exactly one
    // dgemm call, so results do not depend on the thread count.
    let block = row_block(m, k, n);
    if block >= m {
        unsafe { dgemm_block(a, b, c, m, k, n) };
        return;
    }
    c.par_chunks_mut(block * n)
        .enumerate()
        .for_each(|(i, c_chunk)| {
            let r0 = i * block;
            let rows = c_chunk.len() / n;
            unsafe { dgemm_block(&a[r0 * k..(r0 + rows) * k], b, c_chunk, rows, k, n) };
        });
}

fn row_block(m: usize, k: usize, n: usize) -> usize {
    let flops = 2 * m * k * n;
    if flops < 2_000_000 {
        return m;
    }
    // Aim for a handful of blocks per core without tiny remainders.
    (m / 8).max(128).min(m)
}

unsafe fn dgemm_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a.as_ptr(),
        k as isize,
        1,
        b.as_ptr(),
        n as isize,
        1,
        0.0,
        c.as_mut_ptr(),
        n as isize,
        1,
    );
}

/// C[m,n] = A^T[ k->m ] * B, where `a` is [k, m] row-major.
pub fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A * B^T, where `b` is [n, k] row-major.
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let block = row_block(m, k, n);
    if block >= m {
        unsafe { dgemm_bt_block(a, b, c, m, k, n) };
        return;
    }
    c.par_chunks_mut(block * n)
        .enumerate()
        .for_each(|(i, c_chunk)| {
            let r0 = i * block;
            let rows = c_chunk.len() / n;
            unsafe { dgemm_bt_block(&a[r0 * k..(r0 + rows) * k], b, c_chunk, rows, k, n) };
        });
}

unsafe fn dgemm_bt_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a.as_ptr(),
        k as isize,
        1,
        b.as_ptr(),
        1,
        k as isize,
        0.0,
        c.as_mut_ptr(),
        n as isize,
        1,
    );
}

/// Elementwise map, parallel over fixed chunks for large inputs.
pub fn map_unary(x: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    if x.len() < PAR_MIN {
        return x.iter().map(|&v| f(v)).collect();
    }
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(x.par_chunks(PAR_CHUNK))
        .for_each(|(o, xs)| {
            for (o, &v) in o.iter_mut().zip(xs) {
                *o = f(v);
            }
        });
    out
}

pub fn map_binary(x: &[f64], y: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    if x.len() < PAR_MIN {
        return x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect();
    }
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(x.par_chunks(PAR_CHUNK).zip(y.par_chunks(PAR_CHUNK)))
        .for_each(|(o, (xs, ys))| {
            for ((o, &a), &b) in o.iter_mut().zip(xs).zip(ys) {
                *o = f(a, b);
            }
        });
    out
}

/// Deterministic parallel sum: per-chunk partials folded in chunk order.
pub fn sum_all(x: &[f64]) -> f64 {
    if x.len() < PAR_MIN {
        return x.iter().sum();
    }
    x.par_chunks(PAR_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}
