//! Blocked matrix product with a fixed per-element summation order.
//!
//! Every output element is accumulated as `((0 + a0*b0) + a1*b1) + ...` with
//! the inner index ascending, which is exactly what a naive triple loop does.
//! Blocking only changes which elements are computed together, never the
//! order of the additions feeding one element, so results are bit-identical
//! to the naive loop.

const MR: usize = 4;
const NR: usize = 8;
const NC: usize = 128;

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let jn = (j0 + NC).min(n);
        let mut i0 = 0;
        while i0 + MR <= m {
            let mut j = j0;
            while j + NR <= jn {
                micro_kernel(k, n, a, b, c, i0, j);
                j += NR;
            }
            for jj in j..jn {
                for ii in i0..i0 + MR {
                    c[ii * n + jj] = dot_col(k, n, a, b, ii, jj);
                }
            }
            i0 += MR;
        }
        for ii in i0..m {
            let mut j = j0;
            while j + NR <= jn {
                row_kernel(k, n, a, b, c, ii, j);
                j += NR;
            }
            for jj in j..jn {
                c[ii * n + jj] = dot_col(k, n, a, b, ii, jj);
            }
        }
        j0 = jn;
    }
}

#[inline(always)]
fn micro_kernel(k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], i0: usize, j0: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    let a0 = &a[i0 * k..(i0 + 1) * k];
    let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
    let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
    let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
    for p in 0..k {
        let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        let av = [a0[p], a1[p], a2[p], a3[p]];
        for ii in 0..MR {
            for jj in 0..NR {
                acc[ii][jj] += av[ii] * brow[jj];
            }
        }
    }
    for ii in 0..MR {
        c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + NR].copy_from_slice(&acc[ii]);
    }
}

#[inline(always)]
fn row_kernel(k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], i: usize, j0: usize) {
    let mut acc = [0.0f64; NR];
    let arow = &a[i * k..(i + 1) * k];
    for p in 0..k {
        let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        for jj in 0..NR {
            acc[jj] += arow[p] * brow[jj];
        }
    }
    c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
}

#[inline(always)]
fn dot_col(k: usize, n: usize, a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for p in 0..k {
        s += a[i * k + p] * b[p * n + j];
    }
    s
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose(r: usize, c: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `a[m×k] · bᵀ` where `b` is stored `n×k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let bt = transpose(n, k, b);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, &bt, &mut c);
    c
}

/// `aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let at = transpose(k, m, a);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &at, b, &mut c);
    c
}
