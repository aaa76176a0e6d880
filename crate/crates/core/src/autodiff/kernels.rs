//! Dense kernels shared by the forward and backward rules.

use crate::error::{Error, Result};

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, accumulate);
}

/// `c = aᵀ · b` where `a` is stored row-major as `k×m`.
pub(crate) fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm_strided(m, k, n, a, (1, m as isize), b, (n as isize, 1), c, accumulate);
}

/// `c = a · bᵀ` where `b` is stored row-major as `n×k`.
pub(crate) fn gemm_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (1, k as isize), c, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices were bounds-checked above for the logical extents and
    // the strides describe layouts that stay inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Result of aligning two shapes under suffix broadcasting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    pub lhs_small: bool,
    pub rhs_small: bool,
}

/// Operands broadcast only when one shape is a trailing suffix of the other,
/// i.e. repetition over leading batch/sample axes.
pub(crate) fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast {
            out: lhs.to_vec(),
            lhs_small: false,
            rhs_small: false,
        });
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        return Ok(Broadcast {
            out: lhs.to_vec(),
            lhs_small: false,
            rhs_small: true,
        });
    }
    if lhs.len() < rhs.len() && rhs.ends_with(lhs) {
        return Ok(Broadcast {
            out: rhs.to_vec(),
            lhs_small: true,
            rhs_small: false,
        });
    }
    Err(Error::shape(op, lhs, rhs))
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-sum-exp of a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c, false);
        assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));

        // aᵀ stored as k×m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        gemm_at_b(m, k, n, &at, &b, &mut c, false);
        assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        gemm_a_bt(m, k, n, &a, &bt, &mut c, false);
        assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn broadcast_rules() {
        assert!(broadcast("add", &[2, 3], &[3]).unwrap().rhs_small);
        assert!(broadcast("add", &[3], &[4, 2, 3]).unwrap().lhs_small);
        assert!(broadcast("add", &[2, 3], &[2]).is_err());
        assert!(broadcast("add", &[2, 3], &[]).unwrap().rhs_small);
    }

    #[test]
    fn lse_is_overflow_safe() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(softplus(0.0), 2f64.ln());
        assert!(softplus(800.0).is_finite());
    }
}
