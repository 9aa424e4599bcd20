//! Fold orchestration on a tiny synthetic dataset: conservation, rerun
//! determinism, leakage guards and the run directory layout.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use icnet::dataset::{make_folds, make_pairs, Partition};
use icnet::synth::{generate, SynthSpec};
use icnet::trainer::{
    load_run, prepare, run_experiment, run_fold, ExperimentConfig, Phase, PhaseLog, PreparedData,
};
use icnet::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    data: PreparedData,
}

fn tiny_config(root: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(root, out);
    cfg.name = "tiny".into();
    cfg.folds = 2;
    cfg.tnet.model.input_size = 64;
    cfg.tnet.hyper.max_epochs = 2;
    cfg.fnet.model.hidden = 16;
    cfg.fnet.hyper.max_epochs = 3;
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::uniform(4, 4, 11);
        spec.frames_min = 3;
        spec.frames_max = 4;
        let out = generate(&spec, &dir.path().join("data")).unwrap();
        let cfg = tiny_config(&out.root, &dir.path().join("runs")).resolve().unwrap();
        let data = prepare(&cfg).unwrap();
        Fixture { _dir: dir, cfg, data }
    })
}

#[test]
fn records_match_test_pairs_and_rerun_is_identical() {
    let fx = fixture();
    let folds = make_folds(&fx.data.dataset.intersections, fx.cfg.split_ratio, 2, fx.cfg.seed, fx.cfg.split_scheme).unwrap();
    let fold = &folds[0];
    let pairs = make_pairs(fold, &fx.data.dataset.samples_t, &fx.data.dataset.samples_f).unwrap();
    let a = run_fold(&fx.cfg, &fx.data, fold, None).unwrap();
    assert_eq!(a.records.len(), pairs.test.len());
    for r in &a.records {
        for pdf in [&r.t_out, &r.i_out] {
            assert_eq!(pdf.len(), 7);
            assert!((pdf.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!((r.f_out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let b = run_fold(&fx.cfg, &fx.data, fold, None).unwrap();
    let ser = |o: &icnet::trainer::FoldOutput| serde_json::to_string(&o.records).unwrap();
    assert_eq!(ser(&a), ser(&b));
    assert_eq!(a.tnet, b.tnet);
}

#[test]
fn overlapping_fold_is_refused_before_training() {
    let fx = fixture();
    let mut fold = make_folds(&fx.data.dataset.intersections, fx.cfg.split_ratio, 2, 0, fx.cfg.split_scheme)
        .unwrap()
        .remove(0);
    let leaked = fold.test.iter().next().unwrap().clone();
    fold.train.insert(leaked);
    let log = PhaseLog::default();
    let err = run_fold(&fx.cfg, &fx.data, &fold, Some(&log)).unwrap_err();
    assert!(matches!(err, Error::Leakage { .. }), "{err}");
    assert!(log.entries().is_empty());
}

#[test]
fn training_never_sees_val_or_test_intersections() {
    let fx = fixture();
    let folds = make_folds(&fx.data.dataset.intersections, fx.cfg.split_ratio, 2, 5, fx.cfg.split_scheme).unwrap();
    let log = PhaseLog::default();
    run_fold(&fx.cfg, &fx.data, &folds[1], Some(&log)).unwrap();
    let fold = &folds[1];
    let mut phases = BTreeSet::new();
    for (f, phase, id) in log.entries() {
        assert_eq!(f, 1);
        phases.insert(format!("{phase:?}"));
        let expected = match phase {
            Phase::TrainT | Phase::TrainF => Partition::Train,
            Phase::ValT | Phase::ValF => Partition::Val,
            Phase::Test => Partition::Test,
        };
        assert_eq!(fold.partition_of(&id), Some(expected), "{phase:?} saw {id}");
    }
    assert_eq!(phases.len(), 5);
}

#[test]
fn experiment_writes_layout_and_aggregates() {
    let fx = fixture();
    let mut cfg = fx.cfg.clone();
    cfg.name = "layout".into();
    let t0 = Instant::now();
    let res = run_experiment(&cfg, None).unwrap();
    assert!(t0.elapsed().as_secs() < 600);
    for f in 0..2 {
        for file in ["tnet.ckpt", "fnet.ckpt", "predictions.jsonl", "fnet_predictions.jsonl", "log.csv"] {
            assert!(res.run_dir.join(format!("fold{f}")).join(file).exists(), "fold{f}/{file}");
        }
    }
    for file in ["aggregate.json", "folds.json", "config.resolved.toml"] {
        assert!(res.run_dir.join(file).exists(), "{file}");
    }
    let log = std::fs::read_to_string(res.run_dir.join("fold0/log.csv")).unwrap();
    assert!(log.starts_with("net,epoch,train_loss,val_loss,val_acc"));
    let agg = &res.aggregate;
    assert_eq!(agg.methods.len(), 3);
    for m in &agg.methods {
        assert_eq!(m.folds.len(), 2);
        let mean = m.folds.iter().map(|f| f.accuracy).sum::<f64>() / 2.0;
        assert!((mean - m.mean_accuracy).abs() <= 1e-12);
        let n: u64 = m.folds.iter().map(|f| f.samples as u64).sum();
        assert_eq!(m.confusion.total(), n);
    }
    assert_eq!(&load_run(&res.run_dir).unwrap(), agg);
    let resolved = ExperimentConfig::load(&res.run_dir.join("config.resolved.toml")).unwrap();
    assert_eq!(resolved.name, "layout");
}

#[test]
fn missing_cache_without_recompute_fails() {
    let fx = fixture();
    let mut cfg = fx.cfg.clone();
    let empty = tempfile::tempdir().unwrap();
    cfg.features.cache_dir = Some(empty.path().to_path_buf());
    cfg.features.allow_recompute = false;
    assert!(matches!(prepare(&cfg), Err(Error::MissingCache(_))));
}
