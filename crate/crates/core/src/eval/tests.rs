use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{prepare, synth_trimodal, Batch, Modality, SplitFractions, SplitIndices, TrimodalSpec};
use crate::likelihoods::Family;
use crate::models::{LossKind, Model, ModelConfig, ModelKind};

#[test]
fn nrmse_examples() {
    assert_eq!(nrmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    let v = nrmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
    assert!((v - 0.5 * 2f64.sqrt() / 2.0).abs() < 1e-15);
    assert!((v - 0.353_553_390_593_273_8).abs() < 1e-12);
    assert!(nrmse(&[1.0, 1.0], &[0.0, 2.0]).is_err());
    assert!(nrmse(&[], &[]).is_err());
}

#[test]
fn error_rate_and_aggregate() {
    assert_eq!(error_rate(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(error_rate(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 0.0]).unwrap(), 0.25);
    assert!((aggregate(&[0.2, 0.0, 0.1]) - 0.1).abs() < 1e-15);
}

proptest! {
    #[test]
    fn nrmse_is_scale_equivariant_and_permutation_invariant(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..30),
        scale in 0.1f64..50.0,
        rot in 0usize..30,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-6));
        let base = nrmse(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
        prop_assert!((nrmse(&xs, &ys).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
        let k = rot % x.len();
        let (mut xr, mut yr) = (x.clone(), y.clone());
        xr.rotate_left(k);
        yr.rotate_left(k);
        prop_assert!((nrmse(&xr, &yr).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
        let xi: Vec<f64> = x.iter().map(|v| v.round()).collect();
        let yi: Vec<f64> = y.iter().map(|v| v.round()).collect();
        let (mut xir, mut yir) = (xi.clone(), yi.clone());
        xir.rotate_left(k);
        yir.rotate_left(k);
        prop_assert_eq!(error_rate(&xi, &yi).unwrap(), error_rate(&xir, &yir).unwrap());
    }
}

#[test]
fn corrected_ttest_matches_hand_computation() {
    // mean 0.024, sample variance 1.3e-4, correction 1/5 + 2/7; p from t with 4 dof.
    let r = corrected_ttest(&[0.02, 0.03, 0.01, 0.04, 0.02], 7, 2).unwrap();
    assert!((r.mean - 0.024).abs() < 1e-15);
    assert!((r.variance - 1.3e-4).abs() < 1e-15);
    assert!((r.t - 3.020_293_354_245_802_6).abs() < 1e-9, "t = {}", r.t);
    assert!((r.p - 0.019_575_975_553_463_243).abs() < 1e-9, "p = {}", r.p);
    assert!(r.rejects(0.1));
}

#[test]
fn corrected_ttest_degenerate_branches() {
    let zero = corrected_ttest(&[0.0; 5], 7, 2).unwrap();
    assert_eq!((zero.t, zero.p), (0.0, 0.5));
    let ones = corrected_ttest(&[1.0; 5], 7, 2).unwrap();
    assert_eq!((ones.t, ones.p), (f64::INFINITY, 0.0));
    let neg = corrected_ttest(&[-1.0; 3], 7, 2).unwrap();
    assert_eq!((neg.t, neg.p), (f64::NEG_INFINITY, 1.0));
    assert!(corrected_ttest(&[1.0], 7, 2).is_err());
}

#[test]
fn corrected_ttest_reduces_to_classical_without_test_fraction() {
    let d = [0.3, -0.1, 0.4, 0.2, 0.25, 0.05];
    let r = corrected_ttest(&d, 1_000_000_000, 1).unwrap();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let s2 = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((r.t - m / (s2 / n).sqrt()).abs() < 1e-6);
}

fn trimodal_splits(n: usize) -> (Vec<Modality>, Batch, Batch) {
    let ds = synth_trimodal(3, n, &TrimodalSpec::new(10)).unwrap();
    let p = prepare(&ds, SplitIndices::random(n, SplitFractions::default(), 0).unwrap()).unwrap();
    (p.modalities(), p.train, p.test)
}

#[test]
fn probes_pass_the_sanity_gate_and_fall_to_chance_on_shuffled_labels() {
    let (mods, train, test) = trimodal_splits(3000);
    let probes = ProbeSet::fit(&mods, &train, 10, &ProbeConfig::default()).unwrap();
    let labels = test.labels.clone().unwrap();
    for d in 0..2 {
        let acc = probes.accuracy(d, &test.values[d], &labels).unwrap();
        assert!(acc >= 0.95, "modality {d}: {acc}");
    }
    let text = probes.accuracy(2, &test.values[2], &labels).unwrap();
    assert!(text >= 0.93, "text probe {text}");

    let mut shuffled = train.clone();
    let y = shuffled.labels.as_mut().unwrap();
    y.rotate_left(1);
    y.reverse();
    let fresh = trimodal_splits(3000).2;
    let bad = ProbeSet::fit(&mods, &shuffled, 10, &ProbeConfig::default()).unwrap();
    let acc = bad.accuracy(0, &fresh.values[0], fresh.labels.as_ref().unwrap()).unwrap();
    let sd = (0.1f64 * 0.9 / 600.0).sqrt();
    assert!((acc - 0.1).abs() < 4.0 * sd + 0.02, "shuffled accuracy {acc}");
}

#[test]
fn untrained_model_coherence_is_near_chance() {
    let (mods, train, test) = trimodal_splits(3000);
    let probes = ProbeSet::fit(&mods, &train, 10, &ProbeConfig::default()).unwrap();
    let model = Model::build(ModelConfig::new(ModelKind::Mmvae, LossKind::Siwae), mods, 0).unwrap();
    let table = coherence(model.as_mixture().unwrap(), &test, &probes, 0).unwrap();
    assert_eq!(table.cells.len(), 9);
    let sd = (0.1f64 * 0.9 / test.rows() as f64).sqrt();
    for c in &table.cells {
        // Random decoders emit nearly constant outputs, so a single class
        // dominates and accuracy sits at that class's frequency.
        assert!((c.accuracy - 0.1).abs() < 3.0 * sd + 0.03, "{c:?}");
    }
    assert!(table.reconstruction_coherence(3).is_none());
}

#[test]
fn tied_encoders_give_equal_self_and_cross_latent_accuracy() {
    let ds = synth_trimodal(1, 600, &TrimodalSpec::new(4)).unwrap();
    let m = ds.data.values[0].clone();
    let mods = vec![
        Modality::new("A", Family::Normal, 16).unwrap(),
        Modality::new("B", Family::Normal, 16).unwrap(),
    ];
    let data = Batch::new(vec![m.clone(), m], vec![None, None], ds.data.labels.clone()).unwrap();
    let mut cfg = ModelConfig::new(ModelKind::Mmvae, LossKind::Siwae);
    cfg.hidden = Some(16);
    let mut model = Model::build(cfg, mods, 2).unwrap();
    let names: Vec<String> = model.params().names().filter(|n| n.starts_with("encoder0.")).cloned().collect();
    for n in names {
        let v = model.params().get(&n).unwrap().value.clone();
        model.params_mut().set(&n.replacen("encoder0.", "encoder1.", 1), v).unwrap();
    }
    let train = data.select(&(0..400).collect::<Vec<_>>());
    let test = data.select(&(400..600).collect::<Vec<_>>());
    let t = latent_classification(model.as_mixture().unwrap(), &train, &test, 4, &ProbeConfig::default()).unwrap();
    assert_eq!(t.cells.len(), 4);
    assert_eq!(t.self_accuracy(), t.cross_accuracy());
}

#[test]
fn reconstruction_errors_respect_masks_and_families() {
    let mods = vec![
        Modality::new("x", Family::Normal, 1).unwrap(),
        Modality::new("k", Family::Categorical { classes: 3 }, 1).unwrap(),
    ];
    let truth = Batch::new(
        vec![
            Tensor::new(vec![4, 1], vec![0.0, 2.0, 100.0, 1.0]).unwrap(),
            Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 1.0]).unwrap(),
        ],
        vec![Some(Tensor::new(vec![4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap()), None],
        None,
    )
    .unwrap();
    let pred = vec![
        Tensor::new(vec![4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
        Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 0.0]).unwrap(),
    ];
    let e = ReconstructionErrors::compute(&mods, &truth, &pred).unwrap();
    assert!((e.per_modality[0].value - 0.353_553_390_593_273_8).abs() < 1e-12);
    assert_eq!(e.per_modality[1].kind, ErrorKind::ErrorRate);
    assert_eq!(e.per_modality[1].value, 0.25);
    assert!((e.aggregate - (0.353_553_390_593_273_8 + 0.25) / 2.0).abs() < 1e-12);
    assert_eq!(e.family_mean("categorical"), Some(0.25));
}

#[test]
fn report_and_plots_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let report = MetricReport {
        modalities: vec!["x".into(), "k".into()],
        reconstruction: Some(ReconstructionErrors {
            per_modality: vec![ModalityError {
                modality: "x".into(),
                family: "normal".into(),
                kind: ErrorKind::Nrmse,
                value: 0.1,
            }],
            aggregate: 0.1,
        }),
        coherence: Some(CoherenceTable {
            cells: vec![
                CoherenceCell { evidence: vec![0], evidence_label: "{x}".into(), target: 1, accuracy: 0.5 },
                CoherenceCell { evidence: vec![1], evidence_label: "{k}".into(), target: 1, accuracy: 0.9 },
            ],
        }),
        latent: None,
        meta: serde_json::json!({"seed": 1}),
    };
    let csv = dir.path().join("m.csv");
    report.write_csv(&csv).unwrap();
    let rows = report::read_rows(&csv).unwrap();
    assert_eq!(rows, report.rows());
    assert_eq!(rows.iter().find(|r| r.key == "cross").unwrap().value, 0.5);
    assert_eq!(rows.iter().find(|r| r.key == "self").unwrap().value, 0.9);
    let json = dir.path().join("m.json");
    report.write_json(&json).unwrap();
    assert_eq!(MetricReport::read_json(&json).unwrap(), report);

    let svg = plot::pair_plot(&["a".into(), "b".into()], &[("g<1>".into(), vec![vec![0.0, 1.0], vec![1.0, 3.0]])]);
    assert!(svg.starts_with("<svg") && svg.contains("g&lt;1&gt;") && svg.contains("<circle"));
    let svg = plot::parallel_coordinates(&["e1".into(), "e2".into()], &[("run".into(), vec![0.1, 0.4])]);
    assert!(svg.contains("<polyline") && svg.trim_end().ends_with("</svg>"));
}
