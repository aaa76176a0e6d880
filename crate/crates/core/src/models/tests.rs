use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::data::{Batch, Modality};
use crate::impartiality::{BlockSet, Goal, ImpartialityConfig, ResolverBank};
use crate::likelihoods::Family;

fn hetero_modalities() -> Vec<Modality> {
    vec![
        Modality::new("num", Family::Normal, 2).unwrap(),
        Modality::new("pos", Family::LogNormal, 1).unwrap(),
        Modality::new("cnt", Family::Poisson, 1).unwrap(),
        Modality::new("cat", Family::Categorical { classes: 4 }, 1).unwrap(),
    ]
}

fn random_batch(modalities: &[Modality], rows: usize, seed: u64, missing: f64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut values = Vec::new();
    let mut masks = Vec::new();
    for m in modalities {
        let n = rows * m.dim();
        let data: Vec<f64> = (0..n)
            .map(|_| match m.spec.family {
                Family::Normal | Family::Laplace { .. } => normal.sample(&mut rng),
                Family::LogNormal => normal.sample(&mut rng).exp(),
                Family::Poisson => Poisson::new(3.0).unwrap().sample(&mut rng),
                Family::Bernoulli => rng.random_range(0..2) as f64,
                Family::Categorical { classes } => rng.random_range(0..classes) as f64,
            })
            .collect();
        values.push(Tensor::new(vec![rows, m.dim()], data).unwrap());
        masks.push((missing > 0.0).then(|| {
            let mask = (0..n).map(|_| f64::from(rng.random::<f64>() >= missing)).collect();
            Tensor::new(vec![rows, m.dim()], mask).unwrap()
        }));
    }
    Batch::new(values, masks, None).unwrap()
}

fn trimodal() -> Vec<Modality> {
    vec![
        Modality::new("a", Family::Normal, 3).unwrap(),
        Modality::new("b", Family::Normal, 2).unwrap(),
        Modality::new("c", Family::Categorical { classes: 3 }, 1).unwrap(),
    ]
}

fn small(kind: ModelKind, loss: LossKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, loss);
    cfg.hidden = Some(8);
    cfg.latent = Some(3);
    cfg
}

fn loss_and_grads(model: &mut Model, batch: &Batch, seed: u64, resolve: bool) -> (f64, Gradients) {
    let mut tape = Tape::new(seed);
    let out = model.loss(&mut tape, batch).unwrap();
    let value = tape.value(out.loss).item();
    let grads = if resolve {
        let mut bank = ResolverBank::new(model.inventory(), seed);
        tape.backward_with(out.loss, &mut bank).unwrap()
    } else {
        tape.backward(out.loss).unwrap()
    };
    (value, grads)
}

use crate::autodiff::Gradients;

fn max_grad_diff(a: &Gradients, b: &Gradients, filter: impl Fn(&str) -> bool) -> f64 {
    let mut worst = 0.0f64;
    for (name, g) in a.params() {
        if !filter(name) {
            continue;
        }
        let h = b.param(name).unwrap_or_else(|| panic!("missing gradient for {name}"));
        worst = worst.max(g.max_abs_diff(h));
    }
    worst
}

#[test]
fn block_inventory_sizes() {
    let imp = ImpartialityConfig::neutral(BlockSet::all());
    for (kind, expected) in [(ModelKind::Mmvae, 9), (ModelKind::Mopoe, 17), (ModelKind::Mvae, 5)] {
        let mut cfg = small(kind, LossKind::Elbo);
        cfg.impartiality = imp.clone();
        let model = Model::build(cfg, trimodal(), 0).unwrap();
        assert_eq!(model.inventory().len(), expected, "{kind}");
    }
    let mut cfg = small(ModelKind::Mopoe, LossKind::Elbo);
    cfg.impartiality = imp;
    let model = Model::build(cfg, trimodal(), 0).unwrap();
    assert_eq!(model.inventory().count(Goal::Li), 7);
    assert_eq!(model.inventory().count(Goal::Eei), 7);
    assert_eq!(model.inventory().count(Goal::Dei), 3);
}

#[test]
fn vanilla_models_declare_no_blocks() {
    let model = Model::build(small(ModelKind::Mmvae, LossKind::Elbo), trimodal(), 0).unwrap();
    assert!(model.inventory().is_empty());
}

#[test]
fn neutral_blocks_leave_gradients_unchanged() {
    let cases = [
        (ModelKind::Vae, LossKind::Elbo, hetero_modalities()),
        (ModelKind::Vae, LossKind::Iwae, hetero_modalities()),
        (ModelKind::Vae, LossKind::Dreg, hetero_modalities()),
        (ModelKind::HiVae, LossKind::Elbo, hetero_modalities()),
        (ModelKind::Mvae, LossKind::Elbo, trimodal()),
        (ModelKind::Mmvae, LossKind::Siwae, trimodal()),
        (ModelKind::Mopoe, LossKind::Loose, trimodal()),
    ];
    for (kind, loss, mods) in cases {
        let mut cfg = small(kind, loss);
        cfg.k = if loss == LossKind::Elbo { 1 } else { 4 };
        let batch = random_batch(&mods, 16, 3, 0.2);
        let mut vanilla = Model::build(cfg, mods, 11).unwrap();
        let mut neutral = vanilla.clone();
        neutral.set_impartiality(ImpartialityConfig::neutral(BlockSet::all())).unwrap();
        assert!(!neutral.inventory().is_empty());
        let (lv, gv) = loss_and_grads(&mut vanilla, &batch, 5, false);
        let (ln, gn) = loss_and_grads(&mut neutral, &batch, 5, true);
        assert!((lv - ln).abs() <= 1e-12, "{kind}/{loss}: loss {lv} vs {ln}");
        let diff = max_grad_diff(&gv, &gn, |_| true);
        assert!(diff <= 1e-12, "{kind}/{loss}: gradient difference {diff}");
    }
}

#[test]
fn resolvers_change_gradients_but_not_the_loss() {
    use crate::gradconflict::{ResolverChain, ResolverConfig, ResolverKind};
    let mods = trimodal();
    let batch = random_batch(&mods, 16, 4, 0.0);
    let mut vanilla = Model::build(small(ModelKind::Mmvae, LossKind::Elbo), mods, 2).unwrap();
    let mut resolved = vanilla.clone();
    let chain = ResolverChain::single(ResolverConfig::of(ResolverKind::PcGrad));
    resolved
        .set_impartiality(ImpartialityConfig::uniform(BlockSet::all(), chain))
        .unwrap();
    let (lv, gv) = loss_and_grads(&mut vanilla, &batch, 1, false);
    let (lr, gr) = loss_and_grads(&mut resolved, &batch, 1, true);
    assert!((lv - lr).abs() < 1e-12);
    assert!(max_grad_diff(&gv, &gr, |_| true) > 1e-9);
}

#[test]
fn dreg_decoder_gradients_match_iwae() {
    let mods = hetero_modalities();
    let batch = random_batch(&mods, 12, 8, 0.0);
    let mut cfg = small(ModelKind::Vae, LossKind::Iwae);
    cfg.k = 6;
    let mut iwae = Model::build(cfg.clone(), mods.clone(), 3).unwrap();
    cfg.loss = LossKind::Dreg;
    let mut dreg = Model::build(cfg, mods, 3).unwrap();
    let (_, gi) = loss_and_grads(&mut iwae, &batch, 9, false);
    let (_, gd) = loss_and_grads(&mut dreg, &batch, 9, false);
    let diff = max_grad_diff(&gi, &gd, |n| n.starts_with("decoder."));
    assert!(diff <= 1e-10, "decoder gradient difference {diff}");
    assert!(max_grad_diff(&gi, &gd, |n| n.starts_with("encoder.mlp")) > 1e-8);
}

#[test]
fn product_of_experts_matches_density_product() {
    let mut tape = Tape::new(0);
    let m0 = tape.constant(Tensor::vector(vec![0.0]));
    let s0 = tape.constant(Tensor::vector(vec![1.0]));
    let m1 = tape.constant(Tensor::vector(vec![2.0]));
    let (mu, sigma) = product_of_experts(&mut tape, &[(m0, s0), (m1, s0)], false).unwrap();
    let (mu, var) = (tape.value(mu).item(), tape.value(sigma).item().powi(2));
    // Normalize the pointwise product of the two densities on a fine grid.
    let pdf = |x: f64, m: f64| (-(x - m).powi(2) / 2.0).exp();
    let h = 1e-3;
    let grid: Vec<f64> = (-10_000..=12_000).map(|i| i as f64 * h).collect();
    let w: Vec<f64> = grid.iter().map(|&x| pdf(x, 0.0) * pdf(x, 2.0)).collect();
    let z: f64 = w.iter().sum();
    let mean: f64 = grid.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
    let second: f64 = grid.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / z;
    assert!((mu - mean).abs() < 1e-8, "{mu} vs {mean}");
    assert!((var - second).abs() < 1e-8, "{var} vs {second}");
    assert!((mu - 1.0).abs() < 1e-12 && (var - 0.5).abs() < 1e-12);
}

#[test]
fn product_with_prior_adds_unit_precision() {
    let mut tape = Tape::new(0);
    let m = tape.constant(Tensor::vector(vec![3.0]));
    let s = tape.constant(Tensor::vector(vec![1.0]));
    let (mu, sigma) = product_of_experts(&mut tape, &[(m, s)], true).unwrap();
    assert!((tape.value(mu).item() - 1.5).abs() < 1e-12);
    assert!((tape.value(sigma).item().powi(2) - 0.5).abs() < 1e-12);
}

#[test]
fn expert_sets_by_kind() {
    assert_eq!(expert_sets(ModelKind::Mvae, 3).unwrap(), vec![vec![0, 1, 2]]);
    assert_eq!(expert_sets(ModelKind::Mmvae, 2).unwrap(), vec![vec![0], vec![1]]);
    let mopoe = expert_sets(ModelKind::Mopoe, 3).unwrap();
    assert_eq!(mopoe.len(), 7);
    assert_eq!(mopoe[2], vec![0, 1]);
    assert!(expert_sets(ModelKind::Mopoe, 17).is_err());
    assert!(expert_sets(ModelKind::Vae, 2).is_err());
}

#[test]
fn every_model_trains_finitely_with_missing_values() {
    for kind in [ModelKind::Vae, ModelKind::HiVae, ModelKind::Mvae, ModelKind::Mmvae, ModelKind::Mopoe] {
        let mods = if kind.is_mixture() { trimodal() } else { hetero_modalities() };
        let batch = random_batch(&mods, 10, 1, 0.3);
        let mut model = Model::build(small(kind, LossKind::Elbo), mods, 0).unwrap();
        let (l, g) = loss_and_grads(&mut model, &batch, 0, false);
        assert!(l.is_finite() && g.is_finite(), "{kind}");
        assert!(g.squared_norm() > 0.0, "{kind}");
        let rec = model.reconstruct(&batch).unwrap();
        assert_eq!(rec.len(), batch.modalities());
        for (r, v) in rec.iter().zip(&batch.values) {
            assert_eq!(r.shape(), v.shape());
            assert!(r.is_finite());
        }
        let z = model.latent_mean(&batch).unwrap();
        assert_eq!(z.shape(), &[10, model.latent_dim()]);
    }
}

#[test]
fn categorical_reconstructions_are_valid_classes() {
    let mods = hetero_modalities();
    let batch = random_batch(&mods, 20, 2, 0.0);
    let model = Model::build(small(ModelKind::Vae, LossKind::Elbo), mods, 0).unwrap();
    let rec = model.reconstruct(&batch).unwrap();
    assert!(rec[3].data().iter().all(|&c| c.fract() == 0.0 && (0.0..4.0).contains(&c)));
    assert!(rec[1].data().iter().all(|&v| v > 0.0));
}

#[test]
fn invalid_configurations_are_rejected() {
    let mods = trimodal();
    assert!(Model::build(small(ModelKind::Mmvae, LossKind::Dreg), mods.clone(), 0).is_err());
    assert!(Model::build(small(ModelKind::Vae, LossKind::Siwae), mods.clone(), 0).is_err());
    let mut cfg = small(ModelKind::Vae, LossKind::Dreg);
    cfg.k = 1;
    assert!(Model::build(cfg, mods.clone(), 0).is_err());
    let mut model = Model::build(small(ModelKind::Vae, LossKind::Elbo), mods, 0).unwrap();
    let wrong = random_batch(&hetero_modalities()[..2], 4, 0, 0.0);
    let mut tape = Tape::new(0);
    assert!(model.loss(&mut tape, &wrong).is_err());
}

#[test]
fn hivae_normalization_round_trips() {
    let mods = hetero_modalities();
    let batch = random_batch(&mods, 50, 6, 0.1);
    let norm = hivae::NormLayer::fit(&mods, &batch);
    for (d, m) in mods.iter().enumerate() {
        let x = &batch.values[d];
        let back = norm.denormalize(m, d, &norm.normalize(m, d, x));
        assert!(back.max_abs_diff(x) < 1e-9, "{}", m.name);
    }
    let z = norm.normalize(&mods[0], 0, &batch.values[0]);
    let observed: Vec<f64> = z
        .data()
        .iter()
        .zip(batch.mask(0).unwrap().data())
        .filter(|(_, m)| **m != 0.0)
        .map(|(v, _)| *v)
        .collect();
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    assert!(mean.abs() < 0.2);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ivae");
    let mods = trimodal();
    let batch = random_batch(&mods, 8, 0, 0.0);
    let mut model = Model::build(small(ModelKind::Mopoe, LossKind::Siwae), mods, 4).unwrap();
    // Perturb a parameter so the load must restore values, not re-initialize.
    let name = model.params().names().next().unwrap().clone();
    let bumped = model.params().get(&name).unwrap().value.map(|v| v + 0.25);
    model.params_mut().set(&name, bumped).unwrap();
    checkpoint::save(&model, 4, serde_json::json!({"epoch": 3}), &path).unwrap();
    let (loaded, header) = checkpoint::load(&path).unwrap();
    assert_eq!(header.metadata["epoch"], 3);
    assert_eq!(header.schema_hash, checkpoint::schema_hash(&trimodal()));
    for (n, p) in model.params().iter() {
        assert_eq!(&p.value, &loaded.params().get(n).unwrap().value, "{n}");
    }
    let a = model.reconstruct(&batch).unwrap();
    let b = loaded.reconstruct(&batch).unwrap();
    assert_eq!(a, b);

    std::fs::write(&path, b"NOPE").unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn elbo_never_exceeds_iwae_in_expectation() {
    let mods = hetero_modalities();
    let batch = random_batch(&mods, 32, 1, 0.0);
    let mut cfg = small(ModelKind::Vae, LossKind::Elbo);
    cfg.dropout = 0.0;
    cfg.k = 8;
    let mut elbo = Model::build(cfg.clone(), mods.clone(), 0).unwrap();
    cfg.loss = LossKind::Iwae;
    let mut iwae = Model::build(cfg, mods, 0).unwrap();
    let (mut e, mut i) = (0.0, 0.0);
    for s in 0..20 {
        let mut t = Tape::new(s);
        t.set_training(false);
        e += elbo.loss(&mut t, &batch).unwrap().bound;
        let mut t = Tape::new(s);
        t.set_training(false);
        i += iwae.loss(&mut t, &batch).unwrap().bound;
    }
    assert!(i >= e, "iwae {i} < elbo {e}");
}
