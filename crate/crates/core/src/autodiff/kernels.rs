//! Inner loops shared by forward and backward rules.

use crate::scalar::Scalar;

/// `c[n,m] += a[n,k] * b[k,m]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * m..(p + 1) * m], crow);
        }
    }
}

/// `db[k,m] += a[n,k]^T * dc[n,m]`
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, dcrow, &mut db[p * m..(p + 1) * m]);
        }
    }
}

/// `da[n,k] += dc[n,m] * b[k,m]^T`
pub fn matmul_a_bt_acc<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let dcrow = &dc[i * m..(i + 1) * m];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, d) in darow.iter_mut().enumerate() {
            *d += dot(dcrow, &b[p * m..(p + 1) * m]);
        }
    }
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    // Four accumulators keep the loop vectorizable; the summation order is fixed.
    let n = x.len().min(y.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += x[i] * y[i];
    }
    s
}

/// In-place softmax of one row over the entries where `allowed` is true;
/// the rest are set to zero. A row with nothing allowed becomes all zeros.
pub fn masked_softmax_row<T: Scalar>(row: &mut [T], allowed: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}
