//! Tiny accumulating matmul kernels in the three orientations the layers
//! need. Row-major slices, i-k-j loop order so the inner loop strides
//! contiguously and vectorizes.

use crate::tensor::Scalar;

/// c[i,j] += sum_p a[i,p] * b[p,j]; a is (m,k), b is (k,n), c is (m,n).
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += aip * *bv;
            }
        }
    }
}

/// c[i,j] += sum_p a[i,p] * b[j,p]; a is (m,k), b is (n,k), c is (m,n).
pub fn matmul_abt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in a_row.iter().zip(b_row.iter()) {
                acc += *av * *bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[i,j] += sum_p a[p,i] * b[p,j]; a is (k,m), b is (k,n), c is (m,n).
pub fn matmul_atb_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += api * *bv;
            }
        }
    }
}
