use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::methods::project_simplex;
use super::*;

fn stack(rows: &[&[f64]]) -> GradientStack {
    GradientStack::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_stack(rng: &mut ChaCha8Rng, d: usize, l: usize) -> GradientStack {
    GradientStack::from_rows((0..d).map(|_| (0..l).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .unwrap()
}

/// Smallest norm over a simplex grid with the given resolution.
fn grid_min_norm(s: &GradientStack, steps: usize) -> f64 {
    let rows = s.rows();
    let combo = |w: &[f64]| -> f64 {
        let mut v = vec![0.0; s.width()];
        for (r, wi) in rows.iter().zip(w) {
            for (o, x) in v.iter_mut().zip(r) {
                *o += wi * x;
            }
        }
        norm(&v)
    };
    let h = 1.0 / steps as f64;
    let mut best = f64::INFINITY;
    match s.heads() {
        2 => {
            for i in 0..=steps {
                let a = i as f64 * h;
                best = best.min(combo(&[a, 1.0 - a]));
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (a, b) = (i as f64 * h, j as f64 * h);
                    best = best.min(combo(&[a, b, (1.0 - a - b).max(0.0)]));
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

#[test]
fn stack_validation() {
    assert!(GradientStack::from_rows(vec![]).is_err());
    assert!(GradientStack::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    assert!(matches!(
        GradientStack::from_rows(vec![vec![f64::NAN]]),
        Err(crate::Error::NonFinite(_))
    ));
}

#[test]
fn identity_is_exact_pass_through() {
    let s = stack(&[&[0.1, -3.0], &[1e-300, 7.0]]);
    let mut r = Resolver::new(ResolverConfig::identity(), 0);
    assert_eq!(r.resolve(&s).unwrap(), s);
}

#[test]
fn single_head_is_preserved_up_to_positive_scale() {
    let s = stack(&[&[0.3, -1.2, 2.0]]);
    for kind in ResolverKind::ALL {
        let mut r = Resolver::new(ResolverConfig::of(kind), 3);
        let out = r.resolve(&s).unwrap();
        let row = out.row(0);
        let k = row[0] / s.row(0)[0];
        assert!(k > 0.0, "{kind:?}");
        assert!(close(row, &s.row(0).iter().map(|v| v * k).collect::<Vec<_>>(), 1e-12), "{kind:?}");
        if !kind.is_magnitude_aware() {
            assert_eq!(row, s.row(0));
        }
    }
}

#[test]
fn mgda_reference_cases() {
    let (out, gamma) = mgda_ub(&stack(&[&[1.0, 0.0], &[0.0, 1.0]]));
    assert!(close(&gamma, &[0.5, 0.5], 1e-12));
    assert!(close(&out.mean(), &[0.5, 0.5], 1e-12));

    // minimize 4γ² + (1−γ)²  →  γ = 1/5
    let (out, gamma) = mgda_ub(&stack(&[&[2.0, 0.0], &[0.0, 1.0]]));
    assert!(close(&gamma, &[0.2, 0.8], 1e-10));
    assert!(close(&out.mean(), &[0.4, 0.8], 1e-10));
    let s = stack(&[&[2.0, 0.0], &[0.0, 1.0]]);
    assert!(norm(&out.mean()) <= grid_min_norm(&s, 10_000) + 1e-12);

    let (out, _) = mgda_ub(&stack(&[&[0.7, -0.2], &[0.7, -0.2]]));
    assert!(close(&out.mean(), &[0.7, -0.2], 1e-12));

    let (out, _) = mgda_ub(&stack(&[&[0.0, 0.0], &[0.0, 0.0]]));
    assert!(out.rows().iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn mgda_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &(d, l, steps) in &[(2, 2, 10_000), (2, 5, 10_000), (3, 2, 400), (3, 5, 400)] {
        for _ in 0..25 {
            let s = random_stack(&mut rng, d, l);
            let (out, gamma) = mgda_ub(&s);
            assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(gamma.iter().all(|g| *g >= 0.0));
            let (ours, grid) = (norm(&out.mean()), grid_min_norm(&s, steps));
            assert!(ours <= grid + 1e-6, "d={d} l={l}: {ours} vs {grid}, gamma {gamma:?}");
        }
    }
}

#[test]
fn imtl_reference_cases() {
    let (out, alpha) = imtl_g(&stack(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    assert!(close(&alpha, &[1.0, 1.0], 1e-12));
    assert!(close(&out.sum(), &[1.0, 1.0], 1e-12));

    let s = stack(&[&[2.0, 0.0], &[0.0, 1.0]]);
    let (out, _) = imtl_g(&s).unwrap();
    let g = out.sum();
    assert!((g[0] - g[1]).abs() < 1e-10);

    let (_, alpha) = imtl_g(&stack(&[&[3.0, 4.0]])).unwrap();
    assert_eq!(alpha, vec![1.0]);

    let (out, alpha) = imtl_g(&stack(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 2.0]])).unwrap();
    assert_eq!(alpha[1], 0.0);
    assert!((alpha.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    let g = out.sum();
    assert!((g[0] - g[1]).abs() < 1e-10);
}

#[test]
fn imtl_singular_system_is_reported() {
    // parallel rows of different length: no equal-projection solution
    let err = imtl_g(&stack(&[&[1.0, 0.0], &[2.0, 0.0]])).unwrap_err();
    assert!(matches!(err, crate::Error::Singular(_)));
    assert!(err.to_string().contains("consider"));
}

#[test]
fn pcgrad_reference_case() {
    let s = stack(&[&[1.0, 0.0], &[-1.0, 1.0]]);
    let out = pcgrad_with_orders(&s, &[vec![1], vec![0]]);
    assert!(close(out.row(0), &[0.5, 0.5], 1e-15));
    assert!(close(out.row(1), &[0.0, 1.0], 1e-15));

    let s = stack(&[&[1.0, 0.2], &[0.5, 1.0], &[0.0, 0.1]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(pcgrad(&s, &mut rng), s);
}

#[test]
fn graddrop_reference_cases() {
    let s = stack(&[&[1.0, -2.0, 0.5], &[3.0, -0.1, 0.0]]);
    for u in [0.0, 0.3, 0.999] {
        assert_eq!(graddrop_with_uniforms(&s, &[u; 3]), s);
    }
    let s = stack(&[&[1.0], &[-1.0]]);
    let out = graddrop_with_uniforms(&s, &[0.3]);
    assert_eq!(out.rows(), &[vec![1.0], vec![0.0]]);
    let out = graddrop_with_uniforms(&s, &[0.7]);
    assert_eq!(out.rows(), &[vec![0.0], vec![-1.0]]);
    let single = stack(&[&[1.0, -4.0, 0.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(graddrop(&single, &mut rng), single);
}

#[test]
fn gradnorm_reference_cases() {
    let mut state = GradNormState::default();
    let s = stack(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
    for _ in 0..50 {
        let out = gradnorm(&mut state, 0.5, &s);
        assert_eq!(out, s);
    }
    assert_eq!(state.weights, vec![1.0; 3]);

    // α = 0 on constant stacks: weighted norms equalize, so w ∝ 1/n
    let mut state = GradNormState::default();
    let s = stack(&[&[1.0, 0.0], &[0.0, 4.0]]);
    for _ in 0..10_000 {
        gradnorm(&mut state, 0.0, &s);
        assert!((state.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }
    let expected = [1.6, 0.4];
    assert!(close(&state.weights, &expected, 5e-3), "{:?}", state.weights);
}

#[test]
fn cagrad_reference_cases() {
    let s = stack(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let out = cagrad(&s, 0.0);
    assert!(close(&out.sum(), &[0.5, 0.5], 1e-10));
    for c in [0.1, 0.4, 1.0, 10.0] {
        let d = cagrad(&s, c).sum();
        assert!((d[0] - d[1]).abs() < 1e-9, "c = {c}: {d:?}");
    }
    let z = stack(&[&[0.0, 0.0], &[0.0, 0.0]]);
    assert!(cagrad(&z, 0.5).sum().iter().all(|v| *v == 0.0));
}

#[test]
fn simplex_projection() {
    let p = project_simplex(&[0.4, 0.4, 0.4]);
    assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));
    let p = project_simplex(&[2.0, 0.0]);
    assert_eq!(p, vec![1.0, 0.0]);
}

#[test]
fn config_parsing_round_trips() {
    let c: ResolverChain = "gradnorm:alpha=1+pcgrad".parse().unwrap();
    assert_eq!(c.stages().len(), 2);
    assert_eq!(c.stages()[0], ResolverConfig::new(ResolverKind::GradNorm, 1.0).unwrap());
    assert_eq!(c.to_string(), "gradnorm:alpha=1+pcgrad");
    let c: ResolverChain = "mgda_ub+graddrop".parse().unwrap();
    assert_eq!(c.to_string().parse::<ResolverChain>().unwrap(), c);
    assert_eq!("cagrad".parse::<ResolverConfig>().unwrap().alpha, 0.4);
    assert!("".parse::<ResolverChain>().unwrap().is_identity());
    assert!("nope".parse::<ResolverChain>().is_err());
    assert!("gradnorm:alpha=-1".parse::<ResolverConfig>().is_err());
    assert!("gradnorm:beta=1".parse::<ResolverConfig>().is_err());
}

#[test]
fn chains_apply_in_order() {
    let s = stack(&[&[1.0, 0.0], &[-1.0, 1.0]]);
    let chain: ResolverChain = "mgda_ub+pcgrad".parse().unwrap();
    let mut r = ChainResolver::new(&chain, 1);
    let out = r.resolve(&s).unwrap();
    let (first, _) = mgda_ub(&s);
    let expect = pcgrad_with_orders(&first, &[vec![1], vec![0]]);
    assert!(close(&out.sum(), &expect.sum(), 1e-12));
}

#[test]
fn seeded_resolvers_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_stack(&mut rng, 4, 6);
    for kind in [ResolverKind::GradDrop, ResolverKind::PcGrad] {
        let a = Resolver::new(ResolverConfig::of(kind), 9).resolve(&s).unwrap();
        let b = Resolver::new(ResolverConfig::of(kind), 9).resolve(&s).unwrap();
        assert_eq!(a, b);
    }
}

fn rows_strategy(d: std::ops::RangeInclusive<usize>, l: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (d, l).prop_flat_map(|(d, l)| prop::collection::vec(prop::collection::vec(-2.0f64..2.0, l), d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_resolver_preserves_shape(rows in rows_strategy(1..=5, 1..=6), seed in 0u64..1000) {
        let s = GradientStack::from_rows(rows).unwrap();
        for kind in ResolverKind::ALL {
            let mut r = Resolver::new(ResolverConfig::of(kind), seed);
            if let Ok(out) = r.resolve(&s) {
                prop_assert_eq!(out.heads(), s.heads());
                prop_assert_eq!(out.width(), s.width());
                prop_assert!(out.rows().iter().flatten().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn imtl_projections_are_equal(rows in rows_strategy(2..=4, 4..=6)) {
        let s = GradientStack::from_rows(rows).unwrap();
        prop_assume!(s.norms().iter().all(|n| *n > 0.1));
        if let Ok((out, _)) = imtl_g(&s) {
            let g = out.sum();
            let proj: Vec<f64> = s.rows().iter().map(|r| dot(&g, r) / norm(r)).collect();
            for p in &proj {
                prop_assert!((p - proj[0]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pcgrad_removes_conflict_with_last_projector(rows in rows_strategy(2..=4, 2..=5), seed in 0u64..1000) {
        let s = GradientStack::from_rows(rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = s.heads();
        let orders: Vec<Vec<usize>> = (0..d).map(|i| {
            let mut o: Vec<usize> = (0..d).filter(|&j| j != i).collect();
            rand::seq::SliceRandom::shuffle(o.as_mut_slice(), &mut rng);
            o
        }).collect();
        let out = pcgrad_with_orders(&s, &orders);
        for i in 0..d {
            // replay to find the last projector that fired
            let mut g = s.row(i).to_vec();
            let mut last = None;
            for &j in &orders[i] {
                let sq = dot(s.row(j), s.row(j));
                let dd = dot(&g, s.row(j));
                if sq > 0.0 && dd < 0.0 {
                    for (gk, hk) in g.iter_mut().zip(s.row(j)) { *gk -= dd / sq * hk; }
                    last = Some(j);
                }
            }
            if let Some(j) = last {
                prop_assert!(dot(out.row(i), s.row(j)) >= -1e-12);
            }
        }
    }

    #[test]
    fn graddrop_keeps_one_sign_per_coordinate(rows in rows_strategy(1..=5, 1..=6), seed in 0u64..1000) {
        let s = GradientStack::from_rows(rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = graddrop(&s, &mut rng);
        for k in 0..s.width() {
            let pos = out.rows().iter().any(|r| r[k] > 0.0);
            let neg = out.rows().iter().any(|r| r[k] < 0.0);
            prop_assert!(!(pos && neg));
        }
    }

    #[test]
    fn cagrad_stays_in_the_ball(rows in rows_strategy(2..=2, 2..=6), c in 0.0f64..2.0) {
        let s = GradientStack::from_rows(rows).unwrap();
        let g0 = s.mean();
        let d = cagrad(&s, c).sum();
        let diff: Vec<f64> = d.iter().zip(&g0).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&diff) <= c * norm(&g0) + 1e-6);
        let mean = cagrad(&s, 0.0).sum();
        prop_assert!(close(&mean, &g0, 1e-10));
    }

    #[test]
    fn gradnorm_weights_sum_to_heads(seq in prop::collection::vec(rows_strategy(3..=3, 3..=3), 1..20), alpha in 0.0f64..2.0) {
        let mut state = GradNormState::default();
        for rows in seq {
            let s = GradientStack::from_rows(rows).unwrap();
            gradnorm(&mut state, alpha, &s);
            prop_assert!((state.weights.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        }
    }
}
