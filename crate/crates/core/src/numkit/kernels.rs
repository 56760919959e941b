//! Row-blocked dense kernels. Every output element is produced by exactly one
//! worker with a fixed summation order, so sequential and parallel execution
//! agree bit for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

// Below this many multiply-adds the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 15;

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for j in 0..8 {
            acc[j] += a[i + j] * b[i + j];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Applies `f(row_index, row)` to each `width`-sized row of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, work_per_row: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(not(feature = "parallel"))]
    let _ = work_per_row;
    match exec {
        Exec::Sequential => out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            let rows = out.len() / width.max(1);
            if rows * work_per_row < PAR_MIN_WORK || rows < 2 {
                out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            } else {
                out.par_chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            }
        }
    }
}

/// `a[n,k] · b[m,k]ᵀ → [n,m]`.
pub fn matmul_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, exec: Exec) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    let mut out = vec![0.0; n * m];
    for_each_row(&mut out, m, m * k, exec, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[n,m] · b[m,k] → [n,k]`.
pub fn matmul_nn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize, exec: Exec) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), m * k);
    let mut out = vec![0.0; n * k];
    for_each_row(&mut out, k, m * k, exec, |i, row| {
        for (j, &aij) in a[i * m..(i + 1) * m].iter().enumerate() {
            if aij != 0.0 {
                axpy(aij, &b[j * k..(j + 1) * k], row);
            }
        }
    });
    out
}

/// `a[n,m]ᵀ · b[n,k] → [m,k]`.
pub fn matmul_tn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize, exec: Exec) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * k];
    for_each_row(&mut out, k, n * k, exec, |j, row| {
        for r in 0..n {
            let arj = a[r * m + j];
            if arj != 0.0 {
                axpy(arj, &b[r * k..(r + 1) * k], row);
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for t in 0..k {
                    out[i * m + j] += a[i * k + t] * b[j * k + t];
                }
            }
        }
        out
    }

    fn seq(n: usize, off: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * 0.37 + off).sin()).collect()
    }

    #[test]
    fn products_agree_with_naive_loops() {
        let (n, k, m) = (7, 13, 5);
        let a = seq(n * k, 0.1);
        let b = seq(m * k, 0.7);
        let got = matmul_nt(&a, n, k, &b, m, Exec::Sequential);
        for (g, w) in got.iter().zip(naive_nt(&a, n, k, &b, m)) {
            assert!((g - w).abs() < 1e-12);
        }
        // a·(bᵀ)ᵀ via nn with explicit transpose of b
        let mut bt = vec![0.0; k * m];
        for j in 0..m {
            for t in 0..k {
                bt[t * m + j] = b[j * k + t];
            }
        }
        let nn = matmul_nn(&a, n, k, &bt, m, Exec::Sequential);
        for (g, w) in nn.iter().zip(&got) {
            assert!((g - w).abs() < 1e-12);
        }
        let y = seq(n * m, 0.3);
        let tn = matmul_tn(&y, n, m, &a, k, Exec::Sequential);
        for j in 0..m {
            for t in 0..k {
                let w: f64 = (0..n).map(|r| y[r * m + j] * a[r * k + t]).sum();
                assert!((tn[j * k + t] - w).abs() < 1e-12);
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (n, k, m) = (300, 64, 200);
        let a = seq(n * k, 0.2);
        let b = seq(m * k, 0.9);
        assert_eq!(
            matmul_nt(&a, n, k, &b, m, Exec::Sequential),
            matmul_nt(&a, n, k, &b, m, Exec::Parallel)
        );
        let y = seq(n * m, 0.4);
        assert_eq!(
            matmul_tn(&y, n, m, &a, k, Exec::Sequential),
            matmul_tn(&y, n, m, &a, k, Exec::Parallel)
        );
        assert_eq!(
            matmul_nn(&y, n, m, &b, k, Exec::Sequential),
            matmul_nn(&y, n, m, &b, k, Exec::Parallel)
        );
    }
}
