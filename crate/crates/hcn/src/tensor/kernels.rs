//! Row-major matrix kernels shared by forward and backward passes.
//!
//! All kernels accumulate into `c` so backward rules can add straight into
//! gradient buffers; forward callers pass freshly zeroed storage.

/// c (m×p) += a (m×k) · b (k×p). ikj loop order keeps the inner loop a
/// contiguous axpy over rows of `b`.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(c.len(), m * p);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c (m×p) += a (m×k) · bᵀ, where b is stored p×k. Row-row dot products.
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(c.len(), m * p);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// c (k×p) += aᵀ · b, where a is stored m×k and b is m×p.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(c.len(), k * p);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * p..(i + 1) * p];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[l * p..(l + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: usize, k: usize) -> Vec<f64> {
        (0..m * k).map(|i| (i as f64) * 0.37 - 1.1).collect()
    }

    fn reference(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for l in 0..k {
                    c[i * p + j] += a[i * k + l] * b[l * p + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_reference() {
        let (m, k, p) = (3, 5, 4);
        let a = dense(m, k);
        let b = dense(k, p);
        let want = reference(&a, &b, m, k, p);

        let mut c = vec![0.0; m * p];
        matmul_acc(&mut c, &a, &b, m, k, p);
        assert_eq!(c, want);

        let bt = transpose(&b, k, p);
        let mut c = vec![0.0; m * p];
        matmul_nt_acc(&mut c, &a, &bt, m, k, p);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * p];
        matmul_tn_acc(&mut c, &at, &b, k, m, p);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
