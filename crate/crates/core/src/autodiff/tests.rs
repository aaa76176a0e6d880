use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn eval(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new(7);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Max relative error between analytic and central-difference gradients.
fn fd_check(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new(7);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| v.abs() + 0.3)
}

#[test]
fn softplus_and_softmax_identities() {
    let mut tape = Tape::new(0);
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.softplus(x);
    assert!((tape.value(y).item() - 2f64.ln()).abs() < 1e-15);
    let z = tape.constant(Tensor::vector(vec![0.0; 3]));
    let s = tape.softmax(z);
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn tanh_derivative_matches_central_difference() {
    let mut tape = Tape::new(0);
    let x = tape.leaf(Tensor::scalar(0.3), true);
    let y = tape.tanh(x);
    let g = tape.backward(y).unwrap();
    let analytic = g.wrt(x).unwrap().item();
    let h = 1e-6;
    let numeric = ((0.3f64 + h).tanh() - (0.3f64 - h).tanh()) / (2.0 * h);
    assert!((analytic - numeric).abs() / numeric.abs() < 1e-7);
}

#[test]
fn lse_overflow_safe() {
    let mut tape = Tape::new(0);
    let x = tape.leaf(Tensor::vector(vec![1000.0, 1000.0]), true);
    let y = tape.log_sum_exp(x, 0).unwrap();
    assert!((tape.value(y).item() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    let g = tape.backward(y).unwrap();
    for v in g.wrt(x).unwrap().data() {
        assert!((v - 0.5).abs() < 1e-12);
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3]);
        let p = positive(&mut rng, &[2, 3]);
        let w = random(&mut rng, &[3, 2]);
        let cases: Vec<(Vec<Tensor>, Box<Build>)> = vec![
            (vec![a.clone(), b.clone()], Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let s = t.tanh(s);
                Ok(t.sum(s))
            })),
            (vec![a.clone(), b.clone()], Box::new(|t, v| {
                let s = t.sub(v[0], v[1])?;
                let s = t.square(s);
                Ok(t.sum(s))
            })),
            (vec![a.clone(), p.clone()], Box::new(|t, v| {
                let s = t.mul(v[0], v[1])?;
                let s = t.sigmoid(s);
                Ok(t.sum(s))
            })),
            (vec![a.clone(), p.clone()], Box::new(|t, v| {
                let s = t.div(v[0], v[1])?;
                Ok(t.sum(s))
            })),
            (vec![a.clone(), w.clone()], Box::new(|t, v| {
                let s = t.matmul(v[0], v[1])?;
                let s = t.softplus(s);
                Ok(t.sum(s))
            })),
            (vec![p.clone()], Box::new(|t, v| {
                let l = t.log(v[0]);
                let s = t.sqrt(v[0]);
                let e = t.exp(l);
                let m = t.mul(s, e)?;
                Ok(t.sum(m))
            })),
            (vec![a.clone()], Box::new(|t, v| {
                let s = t.softmax(v[0]);
                let sq = t.square(s);
                Ok(t.sum(sq))
            })),
            (vec![a.clone(), a.map(|x| x * 0.7 + 0.1)], Box::new(|t, v| {
                let s = t.log_softmax(v[0]);
                let m = t.mul(s, v[1])?;
                Ok(t.sum(m))
            })),
            (vec![a.clone()], Box::new(|t, v| {
                let l = t.log_sum_exp(v[0], 0)?;
                let q = t.square(l);
                let r = t.log_sum_exp(v[0], 1)?;
                let s1 = t.sum(q);
                let s2 = t.sum(r);
                t.add(s1, s2)
            })),
            (vec![a.clone(), p.clone()], Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.columns(c, 2, 3)?;
                let s = t.tanh(s);
                let r = t.slice(c, 0, 1, 1)?;
                let r = t.square(r);
                let a = t.sum(s);
                let b = t.sum(r);
                t.add(a, b)
            })),
            (vec![a.clone()], Box::new(|t, v| {
                let e = t.expand(v[0], 3)?;
                let s = t.sum_axis(e, 2)?;
                let s = t.tanh(s);
                let m = t.mean_axis(s, 0)?;
                let r = t.reshape(m, &[2])?;
                let q = t.square(r);
                Ok(t.sum(q))
            })),
            (vec![random(&mut rng, &[5, 3]), random(&mut rng, &[5, 3])], Box::new(|t, v| {
                let (n, _, _) = t.batch_norm(v[0], 1e-5)?;
                let m = t.mul(n, v[1])?;
                let m = t.tanh(m);
                Ok(t.sum(m))
            })),
            (vec![a.clone()], Box::new(|t, v| {
                let r = t.relu(v[0]);
                let s = t.abs(v[0]);
                let o = t.offset(r, 0.5);
                let m = t.mul(o, s)?;
                let m = t.scale(m, -1.3);
                Ok(t.mean(m))
            })),
        ];
        for (k, (inputs, f)) in cases.iter().enumerate() {
            let err = fd_check(inputs, f.as_ref());
            assert!(err < 1e-5, "case {k}: relative error {err}");
        }
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::new(0);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    let w = tape.constant(Tensor::zeros(&[4, 1]));
    assert!(matches!(tape.matmul(a, w), Err(Error::Shape { .. })));
}

#[test]
fn linear_map_gradient() {
    // loss = sum(x W): dW[i][j] = sum over rows of x[r][i]
    let mut tape = Tape::new(0);
    let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.leaf(Tensor::matrix(2, 3, vec![0.1; 6]).unwrap(), true);
    let y = tape.matmul(x, w).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut tape = Tape::new(0);
    let x = tape.leaf(Tensor::scalar(1.0), true);
    let y = tape.square(x);
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
}

#[test]
fn non_finite_or_non_scalar_loss_rejected() {
    let mut tape = Tape::new(0);
    let x = tape.leaf(Tensor::scalar(-1.0), true);
    let y = tape.log(x);
    assert!(matches!(tape.backward(y), Err(Error::NonFinite(_))));
    let mut tape = Tape::new(0);
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new(0);
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let d = tape.detach(x);
    assert_eq!(tape.value(d).item(), 2.0);
    let y = tape.mul(d, x).unwrap();
    let g = tape.backward(y).unwrap();
    // only the non-detached factor contributes
    assert_eq!(g.wrt(x).unwrap().item(), 2.0);
    assert!(g.wrt(d).is_none() || !tape.requires_grad(d));
}

#[test]
fn reparam_degenerate_and_law_of_large_numbers() {
    let mut tape = Tape::new(3);
    let mu = tape.leaf(Tensor::vector(vec![0.5, -1.0]), true);
    let zero = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(tape.reparam_normal(mu, zero, 4).is_err());
    let z = tape.reparam_normal_degenerate(mu, zero, 4).unwrap();
    for row in tape.value(z).data().chunks(2) {
        assert_eq!(row, &[0.5, -1.0]);
    }

    let mut tape = Tape::new(3);
    let mu = tape.leaf(Tensor::vector(vec![0.0]), true);
    let one = tape.constant(Tensor::vector(vec![1.0]));
    let z = tape.reparam_normal(mu, one, 1_000_000).unwrap();
    let mean = tape.value(z).sum() / 1e6;
    assert!(mean.abs() < 0.01, "{mean}");
}

#[test]
fn reparam_gradient_wrt_mu_is_one() {
    let mut tape = Tape::new(3);
    let mu = tape.leaf(Tensor::vector(vec![0.2, 0.4, -0.1]), true);
    let sigma = tape.leaf(Tensor::vector(vec![1.0, 0.5, 2.0]), true);
    let z = tape.reparam_normal(mu, sigma, 8).unwrap();
    let m = tape.mean_axis(z, 0).unwrap();
    let l = tape.sum(m);
    let g = tape.backward(l).unwrap();
    for v in g.wrt(mu).unwrap().data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

/// log N(z; mu, sigma) summed, with z = mu + sigma·eps.
fn gaussian_log_density(t: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = t.sub(z, mu)?;
    let r = t.div(d, sigma)?;
    let q = t.square(r);
    let q = t.scale(q, -0.5);
    let ls = t.log(sigma);
    let out = t.sub(q, ls)?;
    let out = t.offset(out, -0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok(t.sum(out))
}

#[test]
fn sticking_the_landing_keeps_only_the_pathwise_term() {
    // Full gradient of log q(z(φ); φ) = pathwise + score. STL detaches q's
    // direct parameter dependence, so it must equal full minus score, where the
    // score term is the finite-difference derivative with z held fixed.
    let (mu0, s0) = (0.3, 0.8);
    let run = |stl: bool| {
        let mut t = Tape::new(5);
        let mu = t.leaf(Tensor::vector(vec![mu0]), true);
        let sigma = t.leaf(Tensor::vector(vec![s0]), true);
        let z = t.reparam_normal(mu, sigma, 1).unwrap();
        let (qm, qs) = if stl { (t.detach(mu), t.detach(sigma)) } else { (mu, sigma) };
        let lq = gaussian_log_density(&mut t, z, qm, qs).unwrap();
        let zv = t.value(z).item();
        let g = t.backward(lq).unwrap();
        (g.wrt(mu).unwrap().item(), g.wrt(sigma).unwrap().item(), zv)
    };
    let (full_mu, full_s, z) = run(false);
    let (stl_mu, stl_s, z2) = run(true);
    assert_eq!(z, z2);
    let h = 1e-6;
    let lq = |m: f64, s: f64| -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let score_mu = (lq(mu0 + h, s0) - lq(mu0 - h, s0)) / (2.0 * h);
    let score_s = (lq(mu0, s0 + h) - lq(mu0, s0 - h)) / (2.0 * h);
    assert!((stl_mu - (full_mu - score_mu)).abs() < 1e-7);
    assert!((stl_s - (full_s - score_s)).abs() < 1e-7);
}

#[test]
fn determinism_with_same_seed() {
    let run = || {
        let mut t = Tape::new(99);
        let x = t.leaf(Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap(), true);
        let d = t.dropout(x, 0.3).unwrap();
        let s = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let m = t.mean_axis(d, 0).unwrap();
        let z = t.reparam_normal(m, s, 3).unwrap();
        let g = t.gumbel_softmax(z, 1.0, 1).unwrap();
        let l = t.sum(g);
        let l = t.tanh(l);
        let v = t.value(l).item();
        let gr = t.backward(l).unwrap();
        (v, gr.wrt(x).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut t = Tape::new(1);
    t.set_training(false);
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let d = t.dropout(x, 0.5).unwrap();
    assert_eq!(d, x);
}

// ---- junctions ----------------------------------------------------------

/// Shared input y feeding two heads: head d computes sum(c_d · y_d).
fn two_head_graph(t: &mut Tape, block: Option<&[f64]>, coef: [f64; 2]) -> (Var, Var) {
    let y = t.leaf(Tensor::vector(vec![0.5, -0.3]), true);
    let junction = block.map(|betas| {
        t.open_junction("toy", vec![vec![y]], vec!["a".into(), "b".into()], betas.to_vec())
            .unwrap()
    });
    let mut outs = vec![];
    for (d, c) in coef.iter().enumerate() {
        let input = match junction {
            Some(j) => t.junction_input(j, 0, d).unwrap()[0],
            None => y,
        };
        let h = t.scale(input, *c);
        let h = t.sum(h);
        let h = match junction {
            Some(j) => t.junction_output(j, d, h).unwrap(),
            None => h,
        };
        outs.push(h);
    }
    if let Some(j) = junction {
        t.close_junction(j).unwrap();
    }
    let l = t.add(outs[0], outs[1]).unwrap();
    (y, l)
}

#[test]
fn junction_is_transparent_and_neutral() {
    let mut plain = Tape::new(0);
    let (y0, l0) = two_head_graph(&mut plain, None, [1.5, -0.5]);
    let mut marked = Tape::new(0);
    let (y1, l1) = two_head_graph(&mut marked, Some(&[1.0, 1.0]), [1.5, -0.5]);
    assert_eq!(plain.value(l0), marked.value(l1));
    let g0 = plain.backward(l0).unwrap();
    let g1 = marked.backward(l1).unwrap();
    assert!(g0.wrt(y0).unwrap().max_abs_diff(g1.wrt(y1).unwrap()) < 1e-12);
}

#[test]
fn head_weights_scale_linearly() {
    let mut plain = Tape::new(0);
    let (y0, l0) = two_head_graph(&mut plain, None, [1.5, -0.5]);
    let mut marked = Tape::new(0);
    let (y1, l1) = two_head_graph(&mut marked, Some(&[2.0, 2.0]), [1.5, -0.5]);
    let g0 = plain.backward(l0).unwrap().wrt(y0).unwrap().clone();
    let g1 = marked.backward(l1).unwrap().wrt(y1).unwrap().clone();
    for (a, b) in g0.data().iter().zip(g1.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

struct Recorder(Vec<Vec<Vec<f64>>>);

impl JunctionResolver for Recorder {
    fn resolve(&mut self, _: &JunctionInfo, _: usize, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        self.0.push(rows.clone());
        Ok(rows)
    }
}

#[test]
fn resolver_sees_per_head_rows() {
    let mut t = Tape::new(0);
    let (y, l) = two_head_graph(&mut t, Some(&[1.0, 1.0]), [1.0, -1.0]);
    let mut rec = Recorder(vec![]);
    let g = t.backward_with(l, &mut rec).unwrap();
    assert_eq!(rec.0, vec![vec![vec![1.0, 1.0], vec![-1.0, -1.0]]]);
    assert_eq!(g.wrt(y).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn resolver_errors_carry_block_and_input() {
    struct Fails;
    impl JunctionResolver for Fails {
        fn resolve(&mut self, _: &JunctionInfo, _: usize, _: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
            Err(Error::Singular("nope".into()))
        }
    }
    let mut t = Tape::new(0);
    let (_, l) = two_head_graph(&mut t, Some(&[1.0, 1.0]), [1.0, 2.0]);
    match t.backward_with(l, &mut Fails) {
        Err(Error::Resolver { block, input, .. }) => {
            assert_eq!(block, "toy");
            assert_eq!(input, 0);
        }
        other => panic!("unexpected {:?}", other.err()),
    }
}

#[test]
fn junction_structure_is_validated() {
    // head 1 reads the raw shared input instead of its copy
    let mut t = Tape::new(0);
    let y = t.leaf(Tensor::vector(vec![1.0]), true);
    let j = t
        .open_junction("bad", vec![vec![y]], vec!["a".into(), "b".into()], vec![1.0, 1.0])
        .unwrap();
    let a = t.junction_input(j, 0, 0).unwrap()[0];
    let _ = t.junction_input(j, 0, 1).unwrap();
    let oa = t.junction_output(j, 0, a).unwrap();
    let b = t.square(y);
    t.junction_output(j, 1, b).unwrap();
    assert!(matches!(t.close_junction(j), Err(Error::Block { .. })));
    let _ = oa;

    // head 1 consumes head 0's copy
    let mut t = Tape::new(0);
    let y = t.leaf(Tensor::vector(vec![1.0]), true);
    let j = t
        .open_junction("bad", vec![vec![y]], vec!["a".into(), "b".into()], vec![1.0, 1.0])
        .unwrap();
    let a = t.junction_input(j, 0, 0).unwrap()[0];
    let b = t.junction_input(j, 0, 1).unwrap()[0];
    let mixed = t.add(a, b).unwrap();
    t.junction_output(j, 0, a).unwrap();
    t.junction_output(j, 1, mixed).unwrap();
    assert!(t.close_junction(j).is_err());

    // non-positive weights are rejected up front
    let mut t = Tape::new(0);
    let y = t.leaf(Tensor::vector(vec![1.0]), true);
    assert!(t.open_junction("bad", vec![vec![y]], vec!["a".into()], vec![0.0]).is_err());
}

#[test]
fn multi_member_input_is_flattened_in_member_order() {
    let mut t = Tape::new(0);
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let b = t.leaf(Tensor::scalar(3.0), true);
    let j = t
        .open_junction("grp", vec![vec![a, b]], vec!["h0".into(), "h1".into()], vec![1.0, 0.5])
        .unwrap();
    let mut outs = vec![];
    for h in 0..2 {
        let m = t.junction_input(j, 0, h).unwrap();
        let sa = t.sum(m[0]);
        let p = t.mul(sa, m[1]).unwrap();
        outs.push(t.junction_output(j, h, p).unwrap());
    }
    t.close_junction(j).unwrap();
    let l = t.add(outs[0], outs[1]).unwrap();
    let mut rec = Recorder(vec![]);
    let g = t.backward_with(l, &mut rec).unwrap();
    assert_eq!(rec.0[0], vec![vec![3.0, 3.0, 3.0], vec![1.5, 1.5, 1.5]]);
    assert_eq!(g.wrt(a).unwrap().data(), &[4.5, 4.5]);
    assert_eq!(g.wrt(b).unwrap().item(), 4.5);
}
