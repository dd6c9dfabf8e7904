//! Minimal dense linear-algebra kernels shared by the LP and QP solvers.

/// LU factorization with partial pivoting, in place. `a` is `n`x`n` row-major.
/// Returns the pivot permutation, or `None` if the matrix is numerically singular.
pub(crate) fn lu_factor(a: &mut [f64], n: usize, piv: &mut [usize]) -> Option<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(piv.len(), n);
    for (i, p) in piv.iter_mut().enumerate() {
        *p = i;
    }
    for k in 0..n {
        let mut pk = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                pk = i;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pk != k {
            piv.swap(k, pk);
            for j in 0..n {
                a.swap(k * n + j, pk * n + j);
            }
        }
        let akk = a[k * n + k];
        for i in (k + 1)..n {
            let f = a[i * n + k] / akk;
            a[i * n + k] = f;
            if f != 0.0 {
                for j in (k + 1)..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
    }
    Some(())
}

/// Solves `A x = rhs` given the factorization from [`lu_factor`]; `rhs` is
/// permuted and overwritten with the solution.
pub(crate) fn lu_solve(a: &[f64], n: usize, piv: &[usize], rhs: &mut [f64]) {
    let mut x = vec![0.0; n];
    for i in 0..n {
        x[i] = rhs[piv[i]];
    }
    for i in 0..n {
        let mut acc = x[i];
        for j in 0..i {
            acc -= a[i * n + j] * x[j];
        }
        x[i] = acc;
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in (i + 1)..n {
            acc -= a[i * n + j] * x[j];
        }
        x[i] = acc / a[i * n + i];
    }
    rhs.copy_from_slice(&x);
}

/// Convenience wrapper: solve `A x = rhs` destructively on copies.
pub(crate) fn solve_dense(a: &[f64], n: usize, rhs: &[f64]) -> Option<Vec<f64>> {
    let mut fac = a.to_vec();
    let mut piv = vec![0usize; n];
    lu_factor(&mut fac, n, &mut piv)?;
    let mut x = rhs.to_vec();
    lu_solve(&fac, n, &piv, &mut x);
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_random_system() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 2.0];
        let x_true = [1.0, -2.0, 3.0];
        let mut rhs = [0.0; 3];
        for i in 0..3 {
            rhs[i] = (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum();
        }
        let x = solve_dense(&a, 3, &rhs).unwrap();
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_detected() {
        let a = [1.0, 2.0, 2.0, 4.0];
        let mut piv = [0usize; 2];
        let mut f = a;
        assert!(lu_factor(&mut f, 2, &mut piv).is_none());
    }
}
