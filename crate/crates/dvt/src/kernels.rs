//! Matrix-multiply kernels.
//!
//! The parallel kernel partitions output rows across rayon workers. Every
//! output element is still produced by one thread running the same fixed-order
//! inner loop as the sequential kernel, so the two are bitwise identical; the
//! bench suite compares their throughput and a property test pins equality.

/// Below this many multiply-adds the parallel kernel is not worth the fork:
/// one training step on the small experiments stays on the sequential path.
pub const PAR_MIN_MACS: usize = 1 << 20;

/// out[m x n] = a[m x k] @ b[k x n]. `out` must be zeroed by the caller.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    });
}

/// Feature- and size-dispatched entry point used by the tape.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_MACS && m > 1 {
            matmul_par(a, b, m, k, n, out);
            return;
        }
    }
    matmul_seq(a, b, m, k, n, out);
}
