use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sbnn_core::config::{ExperimentConfig, TaskSpec};
use sbnn_core::data::{gen_synthetic_classification, gen_synthetic_sequence, load_csv, DatasetSplits, Targets};
use sbnn_core::harness::{evaluate, run, AblationRow, Command, RunContext};
use sbnn_core::layers::Family;
use sbnn_core::metrics::{auroc, mae};
use sbnn_core::model::Model;
use sbnn_core::predict::{mc_predict, TaskKind};
use sbnn_core::rng::RngFactory;
use sbnn_core::train::train;
use sbnn_core::Tensor;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap()
}

fn fit(cfg: &ExperimentConfig) -> (Model, DatasetSplits) {
    let data = cfg.task.generate(cfg.seed, &configs_dir()).unwrap();
    let mut model = Model::build(&cfg.model, &mut RngFactory::new(cfg.seed).stream("init")).unwrap();
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    train(&mut model, &data.train, data.val.as_ref(), &tc).unwrap();
    (model, data)
}

#[test]
fn low_rank_classifier_flags_far_ood_by_mutual_information() {
    let cfg = load("classification.json");
    let TaskSpec::SyntheticClassification { separation, .. } = cfg.task else { panic!("preset task") };
    assert!(separation >= 6.0);
    assert!(cfg.model.layers.iter().any(|f| matches!(f, Family::LowRank { .. })));
    let (model, data) = fit(&cfg);
    let rep = evaluate(&model, &cfg, &data, &RngFactory::new(cfg.seed), &mut BTreeMap::new()).unwrap();
    assert!(rep.metrics["auroc_ood_mi"] >= 0.9, "MI AUROC-OOD {}", rep.metrics["auroc_ood_mi"]);
    assert!(rep.metrics["accuracy"] >= 0.85);
}

#[test]
fn zero_separation_ood_matches_test_distribution() {
    let data = gen_synthetic_classification(4000, 5, 0.0, 9).unwrap();
    let (test, ood) = (data.test.unwrap(), data.ood.unwrap());
    assert_eq!((test.len(), ood.len(), data.train.len()), (4000, 4000, 4000));
    let detectors: [fn(&[f64]) -> f64; 3] = [
        |r| r.iter().map(|v| v * v).sum::<f64>(),
        |r| r[0].abs(),
        |r| r[1..].iter().sum::<f64>(),
    ];
    for det in detectors {
        let mut scores: Vec<f64> = test.x.data().chunks(5).map(det).collect();
        scores.extend(ood.x.data().chunks(5).map(det));
        let labels: Vec<bool> = (0..8000).map(|i| i >= 4000).collect();
        let a = auroc(&scores, &labels).unwrap();
        // standard error at 4000 vs 4000 is about 0.0065
        assert!((a - 0.5).abs() < 0.03, "AUROC {a}");
    }
}

#[test]
fn deterministic_lstm_learns_noiseless_sine() {
    let mut cfg = load("sequence.json");
    cfg.model.layers = vec![Family::Deterministic; 3];
    cfg.task = TaskSpec::SyntheticSequence { n: 400, steps: 24, noise_std: 0.0 };
    cfg.train.kl_weight = 0.0;
    let (mut model, data) = fit(&cfg);
    let test = data.test.unwrap();
    let pred = model
        .predict_once(&test.x, &mut sbnn_core::layers::Noise::Mean)
        .unwrap();
    let err = mae(pred.data(), test.y.values().unwrap()).unwrap();
    assert!(err <= 0.05, "MAE {err}");
}

#[test]
fn sequence_generator_shapes_and_seeding() {
    let a = gen_synthetic_sequence(30, 24, 0.1, 4).unwrap();
    assert_eq!(a.train.x.shape()[1..], [24, 1]);
    assert_eq!((a.train.len(), a.val.as_ref().unwrap().len(), a.test.as_ref().unwrap().len()), (30, 6, 6));
    assert_eq!(a, gen_synthetic_sequence(30, 24, 0.1, 4).unwrap());
    assert_ne!(a, gen_synthetic_sequence(30, 24, 0.1, 5).unwrap());
}

#[test]
fn mutual_information_stabilizes_with_samples() {
    let mut cfg = load("classification.json");
    cfg.train.epochs = 40;
    let (model, data) = fit(&cfg);
    let ood = data.ood.unwrap();
    let x = Tensor::new(vec![200, ood.x.cols()], ood.x.data()[..200 * ood.x.cols()].to_vec()).unwrap();
    let f = RngFactory::new(17);
    let small = mc_predict(&model, &x, 512, &f.child("small"), TaskKind::Classification).unwrap();
    let large = mc_predict(&model, &x, 4096, &f.child("large"), TaskKind::Classification).unwrap();
    let worst = small
        .mutual_information
        .iter()
        .zip(&large.mutual_information)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.01, "max |MI(512) - MI(4096)| = {worst}");
    assert!(large.mutual_information.iter().all(|&m| m >= -1e-12));
}

#[test]
fn csv_split_and_standardization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.csv");
    let mut body = String::from("a,b,y\n");
    for i in 0..10 {
        body.push_str(&format!("{},{},{}\n", i as f64 * 1.5 + 2.0, (i * i) as f64 - 7.0, i % 3));
    }
    std::fs::write(&path, body).unwrap();
    let s = load_csv(&path, "y", [0.8, 0.1, 0.1], false, 3).unwrap();
    assert_eq!(
        (s.train.len(), s.val.as_ref().unwrap().len(), s.test.as_ref().unwrap().len()),
        (8, 1, 1)
    );
    assert_eq!(s, load_csv(&path, "y", [0.8, 0.1, 0.1], false, 3).unwrap());
    for c in 0..2 {
        let mean = (0..8).map(|r| s.train.x.get2(r, c)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-9, "column {c} mean {mean}");
    }
    let cls = load_csv(&path, "y", [0.8, 0.1, 0.1], true, 3).unwrap();
    assert!(matches!(cls.train.y, Targets::Classes(_)));
    assert!(load_csv(&path, "missing", [0.8, 0.1, 0.1], false, 3).is_err());
    std::fs::write(&path, "a,y\n1,2\nx,3\n").unwrap();
    let err = load_csv(&path, "y", [0.8, 0.1, 0.1], false, 3).unwrap_err().to_string();
    assert!(err.contains("row") && err.contains('a'), "{err}");
}

#[test]
fn ablation_params_match_counts_and_grow_with_rank() {
    let mut cfg = load("toy_low_rank.json");
    let ab = cfg.ablation.as_mut().unwrap();
    ab.epochs = Some(1);
    ab.samples = Some(4);
    let ranks = ab.ranks.clone();
    let out = tempfile::tempdir().unwrap();
    let ctx = RunContext { config: Some(cfg.clone()), base: configs_dir(), out: Some(out.path().into()), model_path: None };
    run(&Command::AblateRank, &ctx).unwrap();
    let rows: Vec<AblationRow> =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), ranks);
    for r in &rows {
        let m = Model::build(&cfg.with_rank(r.rank).unwrap().model, &mut RngFactory::new(0).stream("init")).unwrap();
        assert_eq!(r.params, m.param_count().total);
    }
    assert!(rows.windows(2).all(|w| w[0].params < w[1].params));
    assert!(rows.iter().any(|r| r.pareto));
}
