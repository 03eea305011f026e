//! Flat-slice numeric kernels shared by the tape ops and the graph-free
//! inference path. All loops are written so the innermost axis walks
//! contiguous memory, which is what lets a single core keep up with the
//! training and benchmark workloads.

use super::Element;

/// `c += a @ b` for row-major `a: (m,k)`, `b: (k,n)`, `c: (m,n)`.
pub fn mm_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c += a @ b^T` for `a: (m,k)`, `b: (n,k)`, `c: (m,n)`.
pub fn mm_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// `c += a^T @ b` for `a: (m,k)`, `b: (m,n)`, `c: (k,n)`.
pub fn mm_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<E: Element>(row: &mut [E]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maxv(v);
    }
    let mut sum = E::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Layer-norm of one row: `(x - mean) / sqrt(var + eps)`, writing into `out`.
/// Returns `(mean, inv_std)` for reuse in backward passes. A constant row
/// (zero variance) maps to all zeros.
pub fn ln_row<E: Element>(x: &[E], out: &mut [E], eps: f64) -> (E, E) {
    let n = E::from_f64(x.len() as f64);
    let mut mean = E::ZERO;
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::ZERO;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = E::ONE / (var + E::from_f64(eps)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    (mean, inv_std)
}
