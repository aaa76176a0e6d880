//! Variational bounds over per-sample log importance weights.
//!
//! Every function takes values shaped `(K, B)` (samples by rows) and returns
//! a per-row objective `(B)` to be maximized.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log N(z; μ, σ)` summed over the last axis. `z` may carry leading sample axes.
pub fn log_normal(tape: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = tape.sub(z, mu)?;
    let r = tape.div(d, sigma)?;
    let r2 = tape.square(r);
    let q = tape.scale(r2, -0.5);
    let ls = tape.log(sigma);
    let e = tape.sub(q, ls)?;
    let e = tape.offset(e, -HALF_LN_2PI);
    let axis = tape.value(e).rank() - 1;
    tape.sum_axis(e, axis)
}

/// `log N(z; 0, I)` summed over the last axis.
pub fn log_standard_normal(tape: &mut Tape, z: Var) -> Result<Var> {
    let z2 = tape.square(z);
    let e = tape.scale(z2, -0.5);
    let e = tape.offset(e, -HALF_LN_2PI);
    let axis = tape.value(e).rank() - 1;
    tape.sum_axis(e, axis)
}

/// `KL(N(μ, σ) ‖ N(m, I))` per row; `m = None` is the standard normal.
pub fn kl_normal_unit(tape: &mut Tape, mu: Var, sigma: Var, m: Option<Var>) -> Result<Var> {
    let diff = match m {
        Some(m) => tape.sub(mu, m)?,
        None => mu,
    };
    let d2 = tape.square(diff);
    let s2 = tape.square(sigma);
    let ls = tape.log(sigma);
    let two_ls = tape.scale(ls, 2.0);
    let a = tape.add(d2, s2)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.offset(b, -1.0);
    let h = tape.scale(c, 0.5);
    let axis = tape.value(h).rank() - 1;
    tape.sum_axis(h, axis)
}

fn check_kb(tape: &Tape, v: Var) -> Result<()> {
    if tape.value(v).rank() != 2 {
        return Err(Error::invalid(format!(
            "log weights must be (K, B), got {:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// Monte-Carlo ELBO: `mean_k rec_k − KL`.
pub fn elbo(tape: &mut Tape, rec: Var, kl: Var) -> Result<Var> {
    check_kb(tape, rec)?;
    let m = tape.mean_axis(rec, 0)?;
    tape.sub(m, kl)
}

/// `log (1/K) Σ_k w_k`.
pub fn iwae(tape: &mut Tape, log_w: Var) -> Result<Var> {
    check_kb(tape, log_w)?;
    let k = tape.shape(log_w)[0] as f64;
    let l = tape.log_sum_exp(log_w, 0)?;
    Ok(tape.offset(l, -k.ln()))
}

/// Normalized importance weights `ω̃` of `(K, B)` log weights, as constants.
pub fn normalized_weights(log_w: &Tensor) -> Tensor {
    let (k, b) = (log_w.shape()[0], log_w.shape()[1]);
    let d = log_w.data();
    let mut out = vec![0.0; k * b];
    for j in 0..b {
        let m = (0..k).map(|i| d[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..k).map(|i| (d[i * b + j] - m).exp()).sum();
        for i in 0..k {
            out[i * b + j] = (d[i * b + j] - m).exp() / total;
        }
    }
    Tensor::new(vec![k, b], out).expect("consistent shape")
}

/// `Σ_k c_k · log_w_k` with constant coefficients.
pub fn weighted_sum(tape: &mut Tape, log_w: Var, coeff: Tensor) -> Result<Var> {
    check_kb(tape, log_w)?;
    let c = tape.constant(coeff);
    let p = tape.mul(log_w, c)?;
    tape.sum_axis(p, 0)
}

/// Stratified ELBO: mean over strata and samples.
pub fn stratified_elbo(tape: &mut Tape, strata: &[Var]) -> Result<Var> {
    let per: Vec<Var> = strata
        .iter()
        .map(|&s| {
            check_kb(tape, s)?;
            tape.mean_axis(s, 0)
        })
        .collect::<Result<_>>()?;
    mean_of(tape, &per)
}

/// Loose stratified bound: the mixture-weighted sum of per-stratum IWAE terms.
pub fn loose(tape: &mut Tape, strata: &[Var]) -> Result<Var> {
    let per: Vec<Var> = strata.iter().map(|&s| iwae(tape, s)).collect::<Result<_>>()?;
    mean_of(tape, &per)
}

/// Tight stratified bound: one log-sum-exp over every stratum and sample.
pub fn siwae(tape: &mut Tape, strata: &[Var]) -> Result<Var> {
    if strata.is_empty() {
        return Err(Error::invalid("siwae needs at least one stratum"));
    }
    for &s in strata {
        check_kb(tape, s)?;
    }
    let all = tape.concat(strata, 0)?;
    let n = tape.shape(all)[0] as f64;
    let l = tape.log_sum_exp(all, 0)?;
    Ok(tape.offset(l, -n.ln()))
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = parts.split_first() else {
        return Err(Error::invalid("no strata"));
    };
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

/// Analytic `log N(x; 0, s²)` for scalar `x`.
pub fn log_normal_scalar(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * x * x / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_and_kl_match_closed_forms() {
        let mut tape = Tape::new(0);
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap());
        let mu = tape.constant(Tensor::matrix(1, 2, vec![0.1, 0.5]).unwrap());
        let s = tape.constant(Tensor::matrix(1, 2, vec![2.0, 0.5]).unwrap());
        let lp = log_normal(&mut tape, z, mu, s).unwrap();
        let expected = log_normal_scalar(0.2, 4.0) + log_normal_scalar(-1.5, 0.25);
        assert!((tape.value(lp).item() - expected).abs() < 1e-12);

        let kl = kl_normal_unit(&mut tape, mu, s, None).unwrap();
        let hand = 0.5 * ((0.01 + 4.0 - 1.0 - 2.0 * 2f64.ln()) + (0.25 + 0.25 - 1.0 - 2.0 * 0.5f64.ln()));
        assert!((tape.value(kl).item() - hand).abs() < 1e-12);

        let zero = kl_normal_unit(&mut tape, mu, s, Some(mu)).unwrap();
        let unit = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let zero2 = kl_normal_unit(&mut tape, mu, unit, Some(mu)).unwrap();
        assert!(tape.value(zero).item() > 0.0);
        assert_eq!(tape.value(zero2).item(), 0.0);
    }

    #[test]
    fn iwae_with_one_sample_is_the_log_weight() {
        let mut tape = Tape::new(0);
        let lw = tape.constant(Tensor::matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap());
        let b = iwae(&mut tape, lw).unwrap();
        assert_eq!(tape.value(b).data(), &[-1.0, 0.5, 2.0]);
        let l = loose(&mut tape, &[lw]).unwrap();
        let s = siwae(&mut tape, &[lw]).unwrap();
        assert_eq!(tape.value(l).data(), tape.value(s).data());
    }

    #[test]
    fn bounds_survive_extreme_ratios() {
        let mut tape = Tape::new(0);
        let lw = tape.constant(Tensor::matrix(2, 1, vec![300.0, -300.0]).unwrap());
        let b = iwae(&mut tape, lw).unwrap();
        assert!((tape.value(b).item() - (300.0 - 2f64.ln())).abs() < 1e-9);
        let w = normalized_weights(tape.value(lw));
        assert_eq!(w.data()[0], 1.0);
        assert!(w.data()[1] >= 0.0);
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let t = Tensor::matrix(3, 2, vec![0.1, -4.0, 2.0, 7.0, -1.0, 7.0]).unwrap();
        let w = normalized_weights(&t);
        for j in 0..2 {
            let s: f64 = (0..3).map(|i| w.data()[i * 2 + j]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        let equal = normalized_weights(&Tensor::matrix(4, 1, vec![3.0; 4]).unwrap());
        assert!(equal.data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn siwae_is_at_least_loose() {
        let mut tape = Tape::new(0);
        let a = tape.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, -2.0, 0.3]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![-5.0, 0.2, 1.0, -0.1]).unwrap());
        let l = loose(&mut tape, &[a, b]).unwrap();
        let s = siwae(&mut tape, &[a, b]).unwrap();
        for (x, y) in tape.value(s).data().iter().zip(tape.value(l).data()) {
            assert!(x >= y);
        }
    }
}
