use super::*;
use crate::autodiff::{ParamGroup, ParamStore, Tape, Tensor};
use crate::data::{prepare, synth_hetero, HeteroSpec, SplitFractions, SplitIndices};
use crate::gradconflict::{ResolverChain, ResolverKind};
use crate::impartiality::{BlockSet, ImpartialityConfig};
use crate::models::{LossKind, Model, ModelConfig, ModelKind};

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![3.0, -2.0, 0.5]), ParamGroup::Shared).unwrap();
    let target = [1.0, 1.0, -1.0];
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    });
    for _ in 0..2000 {
        let mut tape = Tape::new(0);
        let w = tape.param(&store, "w").unwrap();
        let t = tape.constant(Tensor::vector(target.to_vec()));
        let d = tape.sub(w, t).unwrap();
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        adam.step(&mut store, &grads);
    }
    let w = store.get("w").unwrap().value.data().to_vec();
    for (a, b) in w.iter().zip(target) {
        assert!((a - b).abs() < 1e-3, "{w:?}");
    }
    assert_eq!(adam.steps(), 2000);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    for amsgrad in [false, true] {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.0, 0.0]), ParamGroup::Shared).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            amsgrad,
            ..AdamConfig::default()
        });
        let mut tape = Tape::new(0);
        let w = tape.param(&store, "w").unwrap();
        let c = tape.constant(Tensor::vector(vec![3.0, -0.2]));
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        adam.step(&mut store, &grads);
        let w = store.get("w").unwrap().value.data().to_vec();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }
}

#[test]
fn grid_has_twelve_chains() {
    let grid = resolver_grid(&[]);
    assert_eq!(grid.len(), 12);
    assert!(grid[0].is_identity());
    let names: Vec<String> = grid.iter().map(|c| c.to_string()).collect();
    let unique: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(unique.len(), 12);
    for chain in &grid {
        let s = chain.stages();
        assert!(s.len() <= 2);
        if s.len() == 2 {
            assert!(s[0].kind.is_magnitude_aware() && !s[1].kind.is_magnitude_aware());
        }
    }
    assert_eq!(resolver_grid(&[0.0, 1.0]).len(), 15);
    let parsed: ResolverChain = names[5].parse().unwrap();
    assert_eq!(parsed, grid[5]);
    assert!(grid.iter().any(|c| c.stages().iter().any(|s| s.kind == ResolverKind::ImtlG)));
}

#[test]
fn selection_uses_median_then_mean_then_spread() {
    let c = |name: &str, m: &[f64]| Candidate {
        name: name.into(),
        metrics: m.to_vec(),
    };
    let cands = vec![
        c("a", &[0.3, 0.3, 0.3]),
        c("b", &[0.1, 0.2, 0.9]),
        c("c", &[0.0, 0.2, 0.5]),
        c("d", &[0.2, 0.2, 0.2]),
    ];
    // b, c, d share median 0.2; d has the lowest mean.
    assert_eq!(select_best(&cands), Some(3));
    let tied = vec![c("x", &[0.1, 0.2, 0.3]), c("y", &[0.15, 0.2, 0.25])];
    assert_eq!(select_best(&tied), Some(1));
    let s = summarize(&[1.0, f64::NAN, 3.0]);
    assert_eq!(s.median, 2.0);
    assert!(select_best(&[]).is_none());
}

fn hetero_prepared(n: usize, seed: u64) -> crate::data::Prepared {
    let spec = HeteroSpec::default();
    let dataset = synth_hetero(seed, n, &spec).unwrap();
    let idx = SplitIndices::random(n, SplitFractions::default(), seed).unwrap();
    prepare(&dataset, idx).unwrap()
}

fn small_vae() -> ModelConfig {
    let mut cfg = ModelConfig::new(ModelKind::Vae, LossKind::Elbo);
    cfg.hidden = Some(16);
    cfg.latent = Some(2);
    cfg
}

#[test]
fn training_improves_the_validation_bound() {
    let prepared = hetero_prepared(400, 3);
    let mut model = Model::build(small_vae(), prepared.modalities(), 0).unwrap();
    let before = validation_loss(&mut model, &prepared.val, 64, 0).unwrap();
    let mut cfg = TrainConfig::for_model(&model, 15, 0);
    cfg.optimizer.learning_rate = 5e-3;
    let val = prepared.val.clone();
    let mut validate = |m: &mut Model| validation_loss(m, &val, 64, 0);
    let report = fit(&mut model, &prepared.train, &cfg, Some(&mut validate)).unwrap();
    let after = validation_loss(&mut model, &prepared.val, 64, 0).unwrap();
    assert!(after < before - 1.0, "{before} -> {after}");
    assert_eq!(report.history.len(), 15);
    assert_eq!(report.skipped_steps, 0);
    assert!((after - report.best_metric.unwrap()).abs() < 1e-9);
}

#[test]
fn training_is_deterministic_per_seed() {
    let prepared = hetero_prepared(200, 5);
    let run = |seed| {
        let mut cfg = small_vae();
        cfg.impartiality = ImpartialityConfig::uniform(BlockSet::all(), "imtl_g+pcgrad".parse().unwrap());
        let mut model = Model::build(cfg, prepared.modalities(), seed).unwrap();
        let tc = TrainConfig::for_model(&model, 3, seed);
        fit(&mut model, &prepared.train, &tc, None).unwrap();
        model.params().get("dec.out0.w").map(|p| p.value.clone()).unwrap_or_else(|| {
            let (_, p) = model.params().iter().last().unwrap();
            p.value.clone()
        })
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn tabular_run_reports_raw_unit_errors() {
    let prepared = hetero_prepared(300, 7);
    let model = Model::build(small_vae(), prepared.modalities(), 0).unwrap();
    let cfg = TrainConfig::for_model(&model, 2, 0);
    let (_, out) = run(&prepared, small_vae(), &cfg, Selection::ValError, None).unwrap();
    let rec = out.report.reconstruction.unwrap();
    assert_eq!(rec.per_modality.len(), prepared.modalities().len());
    let cat = rec.family_mean("categorical").unwrap();
    assert!((0.0..=1.0).contains(&cat));
    assert!(out.train.best_epoch.is_some());
}

#[test]
fn fit_rejects_bad_inputs() {
    let prepared = hetero_prepared(100, 1);
    let mut model = Model::build(small_vae(), prepared.modalities(), 0).unwrap();
    let mut cfg = TrainConfig::for_model(&model, 1, 0);
    cfg.batch_size = 0;
    assert!(fit(&mut model, &prepared.train, &cfg, None).is_err());
    let empty = prepared.train.select(&[]);
    cfg.batch_size = 8;
    assert!(fit(&mut model, &empty, &cfg, None).is_err());
}

#[test]
fn report_csv_has_one_row_per_epoch() {
    let prepared = hetero_prepared(100, 2);
    let mut model = Model::build(small_vae(), prepared.modalities(), 0).unwrap();
    let cfg = TrainConfig::for_model(&model, 3, 0);
    let report = fit(&mut model, &prepared.train, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(report.seconds_per_epoch() > 0.0);
}

#[test]
fn selection_parses_and_checks_requirements() {
    assert_eq!("val-bound".parse::<Selection>().unwrap(), Selection::ValBound);
    assert_eq!(Selection::ValCoherence.to_string().parse::<Selection>().unwrap(), Selection::ValCoherence);
    assert!("best".parse::<Selection>().is_err());
    let prepared = hetero_prepared(100, 4);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        optimizer: AdamConfig::default(),
        seed: 0,
        validate_every: 1,
        restore_best: true,
    };
    assert!(run(&prepared, small_vae(), &cfg, Selection::ValCoherence, None).is_err());
}
