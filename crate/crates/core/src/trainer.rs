//! k-fold experiments: ingest, split, train both nets per fold, predict
//! test pairs, fuse, and aggregate.
//!
//! Run directory layout:
//!
//! ```text
//! <out_dir>/<name>/
//!   config.resolved.toml   folds.json   aggregate.json
//!   fold<i>/tnet.ckpt  fnet.ckpt  predictions.jsonl  fnet_predictions.jsonl  log.csv
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ingest, make_folds, make_pairs, save_folds, Dataset, FoldPlan, IngestOptions, SampleF, SplitScheme,
};
use crate::error::{Error, Result};
use crate::evalkit::{Aggregate, FoldMetrics, MethodSummary};
use crate::flowfeat::{default_pipeline, EmbeddingCache, EmbeddingSequence, DEFAULT_SEQ_LEN};
use crate::fnet::{predict_fnet, train_fnet, FNet, FNetConfig, FNetTraining};
use crate::inet::{fuse, FusionConfig};
use crate::labels::{Catalogue, D2iConfig, EgoMotion, NUM_MOTIONS, NUM_TOPOLOGIES};
use crate::nn::{EpochLog, TrainHyper};
use crate::tnet::{build_tnet, load_image, predict_tnet, train_tnet, Backbone, TNet, TNetConfig, TNetTraining};

/// Environment variable that overrides [`FeatureConfig::cache_dir`].
pub const CACHE_DIR_ENV: &str = "ICNET_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSection<C> {
    #[serde(flatten)]
    pub hyper: TrainHyper,
    #[serde(flatten)]
    pub model: C,
}

impl<C: Default> Default for NetSection<C> {
    fn default() -> Self {
        Self {
            hyper: TrainHyper::default(),
            model: C::default(),
        }
    }
}

/// Where the T-Net conv weights come from. Without a snapshot file a
/// seeded VGG16-layout backbone of the given width is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSource {
    pub snapshot: Option<PathBuf>,
    pub width_divisor: usize,
    pub seed: u64,
}

impl Default for BackboneSource {
    fn default() -> Self {
        Self {
            snapshot: None,
            width_divisor: 16,
            seed: 0,
        }
    }
}

impl BackboneSource {
    pub fn load(&self) -> Result<Backbone> {
        match &self.snapshot {
            Some(p) => Backbone::load(p),
            None => Ok(Backbone::vgg16(self.width_divisor, self.seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub seq_len: usize,
    pub embedder_seed: u64,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// When false, a missing cache entry is an error.
    pub allow_recompute: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            seq_len: DEFAULT_SEQ_LEN,
            embedder_seed: 0,
            cache_dir: None,
            allow_recompute: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub folds: usize,
    pub split_ratio: (u32, u32, u32),
    pub split_scheme: SplitScheme,
    pub data_root: PathBuf,
    pub annotations: PathBuf,
    /// Optional catalogue TOML; its D2I windows and consistency matrix
    /// replace `d2i` and `fusion.consistency`.
    pub catalogue: Option<PathBuf>,
    pub strict_ingest: bool,
    pub out_dir: PathBuf,
    pub deterministic: bool,
    pub backbone: BackboneSource,
    pub features: FeatureConfig,
    pub tnet: NetSection<TNetConfig>,
    pub fnet: NetSection<FNetConfig>,
    pub d2i: D2iConfig,
    pub fusion: FusionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            folds: 5,
            split_ratio: (5, 2, 3),
            split_scheme: SplitScheme::default(),
            data_root: PathBuf::from("data"),
            annotations: PathBuf::from("data/annotations.csv"),
            catalogue: None,
            strict_ingest: false,
            out_dir: PathBuf::from("runs"),
            deterministic: false,
            backbone: BackboneSource::default(),
            features: FeatureConfig::default(),
            tnet: NetSection::default(),
            fnet: NetSection::default(),
            d2i: D2iConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Settings that train in minutes on the generated toy dataset. The
    /// default learning rate is far too small for a randomly initialised
    /// backbone on a few dozen images.
    pub fn synthetic(data_root: &Path, out_dir: &Path) -> Self {
        let mut cfg = Self {
            name: "synthetic".into(),
            data_root: data_root.to_path_buf(),
            annotations: data_root.join("annotations.csv"),
            out_dir: out_dir.to_path_buf(),
            ..Self::default()
        };
        cfg.tnet.hyper = TrainHyper {
            lr: 1e-3,
            batch_size: 7,
            max_epochs: 30,
            patience: 8,
            ..TrainHyper::default()
        };
        cfg.fnet.hyper = TrainHyper {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 60,
            patience: 15,
            ..TrainHyper::default()
        };
        cfg
    }

    /// Resolve the catalogue and cache directory; check values.
    pub fn resolve(mut self) -> Result<Self> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if let Some(p) = &self.catalogue {
            let cat = Catalogue::load(p)?;
            self.d2i = cat.d2i;
            self.fusion.consistency = cat.consistency();
        }
        self.d2i.validate()?;
        self.fusion.validate()?;
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                self.features.cache_dir = Some(PathBuf::from(dir));
            }
        }
        if self.features.cache_dir.is_none() {
            self.features.cache_dir = Some(self.out_dir.join("cache"));
        }
        for p in [&self.data_root, &self.annotations] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        Ok(self)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    fn cache(&self) -> EmbeddingCache {
        EmbeddingCache::new(self.features.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache")))
    }
}

/// What a training or evaluation code path was handed, for leakage audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TrainT,
    ValT,
    TrainF,
    ValF,
    Test,
}

pub trait PhaseObserver: Sync {
    fn observe(&self, fold: usize, phase: Phase, intersection_id: &str);
}

/// Observer that records every `(fold, phase, intersection)` it sees.
#[derive(Debug, Default)]
pub struct PhaseLog(Mutex<Vec<(usize, Phase, String)>>);

impl PhaseLog {
    pub fn entries(&self) -> Vec<(usize, Phase, String)> {
        self.0.lock().expect("phase log").clone()
    }
}

impl PhaseObserver for PhaseLog {
    fn observe(&self, fold: usize, phase: Phase, intersection_id: &str) {
        self.0.lock().expect("phase log").push((fold, phase, intersection_id.to_string()));
    }
}

/// Ingested dataset plus every preprocessed input the folds need.
pub struct PreparedData {
    pub dataset: Dataset,
    pub images: HashMap<PathBuf, Array3<f32>>,
    /// Keyed by [`SampleF::key`].
    pub sequences: HashMap<String, EmbeddingSequence>,
}

pub fn ingest_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    ingest(
        &cfg.data_root,
        &cfg.annotations,
        &cfg.d2i,
        IngestOptions {
            strict: cfg.strict_ingest,
        },
    )
}

/// Compute (or fetch from the cache) the embedding sequence of every F sample.
pub fn extract_sequences(cfg: &ExperimentConfig, samples: &[SampleF]) -> Result<HashMap<String, EmbeddingSequence>> {
    let cache = cfg.cache();
    std::fs::create_dir_all(cache.dir()).map_err(|e| Error::io(cache.dir(), e))?;
    let encoder = default_pipeline(cfg.features.embedder_seed);
    samples
        .iter()
        .map(|s| {
            let key = s.key();
            let seq = cache.get_or_compute(
                &key,
                &s.frame_paths,
                &encoder,
                cfg.features.seq_len,
                cfg.features.allow_recompute,
            )?;
            Ok((key, seq))
        })
        .collect()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let dataset = ingest_for(cfg)?;
    let size = cfg.tnet.model.input_size;
    let images = dataset
        .samples_t
        .par_iter()
        .map(|s| Ok((s.image_path.clone(), load_image(&s.image_path, size)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let sequences = extract_sequences(cfg, &dataset.samples_f)?;
    Ok(PreparedData {
        dataset,
        images,
        sequences,
    })
}

/// One test pair's predictions. Classes are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub fold: usize,
    pub sample_id: String,
    pub intersection_id: String,
    pub true_class: u8,
    pub true_motion: u8,
    pub reused: bool,
    pub t_out: Vec<f64>,
    pub f_out: Vec<f64>,
    pub i_out: Vec<f64>,
    pub mask: Vec<bool>,
    pub fallback: bool,
    pub t_pred: u8,
    pub i_pred: u8,
}

/// F-Net on one test sequence, scored on the 3-class motion task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub fold: usize,
    pub sample_id: String,
    pub true_motion: u8,
    pub f_out: Vec<f64>,
    pub f_pred: u8,
}

#[derive(Debug, Clone)]
pub struct FoldOutput {
    pub fold: usize,
    pub records: Vec<PredictionRecord>,
    pub motion_records: Vec<MotionRecord>,
    pub tnet: TNet,
    pub fnet: FNet,
    pub tnet_logs: Vec<EpochLog>,
    pub fnet_logs: Vec<EpochLog>,
}

/// splitmix64 step, so per-fold seeds differ but stay reproducible.
fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn missing(what: &str, key: &str) -> Error {
    Error::Format(format!("prepared data has no {what} for {key}"))
}

fn observe(observer: Option<&dyn PhaseObserver>, fold: usize, phase: Phase, id: &str) {
    if let Some(o) = observer {
        o.observe(fold, phase, id);
    }
}

/// Preprocessed T images of the intersections in `ids`, with labels.
fn t_set(
    data: &PreparedData,
    ids: &BTreeSet<String>,
    fold: usize,
    phase: Phase,
    observer: Option<&dyn PhaseObserver>,
) -> Result<Vec<(Array3<f32>, u8)>> {
    data.dataset
        .samples_t
        .iter()
        .filter(|s| ids.contains(&s.intersection_id))
        .map(|s| {
            observe(observer, fold, phase, &s.intersection_id);
            let x = data.images.get(&s.image_path).ok_or_else(|| missing("image", &s.intersection_id))?;
            Ok((x.clone(), s.topology))
        })
        .collect()
}

fn f_set(
    data: &PreparedData,
    ids: &BTreeSet<String>,
    fold: usize,
    phase: Phase,
    observer: Option<&dyn PhaseObserver>,
) -> Result<Vec<(EmbeddingSequence, EgoMotion)>> {
    data.dataset
        .samples_f
        .iter()
        .filter(|s| ids.contains(&s.intersection_id))
        .map(|s| {
            observe(observer, fold, phase, &s.intersection_id);
            let seq = data.sequences.get(&s.key()).ok_or_else(|| missing("sequence", &s.key()))?;
            Ok((seq.clone(), s.egomotion))
        })
        .collect()
}

/// Train the T-Net of one fold (train partition, early stopping on val).
pub fn train_fold_tnet(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    fold: &FoldPlan,
    observer: Option<&dyn PhaseObserver>,
) -> Result<TNetTraining> {
    fold.check_disjoint()?;
    let f = fold.fold_index;
    let backbone = cfg.backbone.load()?;
    let model_cfg = TNetConfig {
        head_seed: derive_seed(cfg.seed, 2 * f as u64 + 1),
        ..cfg.tnet.model
    };
    let hyper = TrainHyper {
        seed: derive_seed(cfg.tnet.hyper.seed ^ cfg.seed, 2 * f as u64 + 1),
        ..cfg.tnet.hyper
    };
    let train = t_set(data, &fold.train, f, Phase::TrainT, observer)?;
    let val = t_set(data, &fold.val, f, Phase::ValT, observer)?;
    train_tnet(build_tnet(&backbone, model_cfg)?, &train, &val, &hyper)
}

/// Train the F-Net of one fold.
pub fn train_fold_fnet(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    fold: &FoldPlan,
    observer: Option<&dyn PhaseObserver>,
) -> Result<FNetTraining> {
    fold.check_disjoint()?;
    let f = fold.fold_index;
    let model_cfg = FNetConfig {
        init_seed: derive_seed(cfg.seed, 2 * f as u64 + 2),
        ..cfg.fnet.model
    };
    let hyper = TrainHyper {
        seed: derive_seed(cfg.fnet.hyper.seed ^ cfg.seed, 2 * f as u64 + 2),
        ..cfg.fnet.hyper
    };
    let train = f_set(data, &fold.train, f, Phase::TrainF, observer)?;
    let val = f_set(data, &fold.val, f, Phase::ValF, observer)?;
    train_fnet(FNet::new(model_cfg), &train, &val, &hyper)
}

/// Train both nets on the fold's train partition (early stopping on val)
/// and predict every test pair. Refuses folds whose partitions overlap
/// before any training starts.
pub fn run_fold(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    fold: &FoldPlan,
    observer: Option<&dyn PhaseObserver>,
) -> Result<FoldOutput> {
    fold.check_disjoint()?;
    let f = fold.fold_index;
    let seen = |phase: Phase, id: &str| observe(observer, f, phase, id);
    let ds = &data.dataset;
    let pairs = make_pairs(fold, &ds.samples_t, &ds.samples_f)?;
    let tnet = train_fold_tnet(cfg, data, fold, observer)?;
    let fnet = train_fold_fnet(cfg, data, fold, observer)?;

    let (tm, fm) = (&tnet.model, &fnet.model);
    let records = pairs
        .test
        .par_iter()
        .map(|p| {
            seen(Phase::Test, &p.sample_t.intersection_id);
            let x = data
                .images
                .get(&p.sample_t.image_path)
                .ok_or_else(|| missing("image", &p.sample_t.intersection_id))?;
            let seq = data
                .sequences
                .get(&p.sample_f.key())
                .ok_or_else(|| missing("sequence", &p.sample_f.key()))?;
            let t_out = predict_tnet(tm, x)?;
            let f_out = predict_fnet(fm, seq)?;
            let fused = fuse(&t_out, &f_out, &cfg.fusion)?;
            Ok(PredictionRecord {
                fold: f,
                sample_id: p.sample_id(),
                intersection_id: p.sample_t.intersection_id.clone(),
                true_class: p.topology,
                true_motion: p.sample_f.egomotion.id() as u8,
                reused: p.reused,
                t_pred: t_out.top1() as u8,
                i_pred: fused.pdf.top1() as u8,
                t_out: t_out.values().to_vec(),
                f_out: f_out.values().to_vec(),
                i_out: fused.pdf.values().to_vec(),
                mask: fused.mask.0.to_vec(),
                fallback: fused.fallback,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let test_f: Vec<&SampleF> = ds.samples_f.iter().filter(|s| fold.test.contains(&s.intersection_id)).collect();
    let motion_records = test_f
        .par_iter()
        .map(|s| {
            seen(Phase::Test, &s.intersection_id);
            let seq = data.sequences.get(&s.key()).ok_or_else(|| missing("sequence", &s.key()))?;
            let f_out = predict_fnet(fm, seq)?;
            Ok(MotionRecord {
                fold: f,
                sample_id: s.key(),
                true_motion: s.egomotion.id() as u8,
                f_pred: f_out.top1() as u8,
                f_out: f_out.values().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FoldOutput {
        fold: f,
        records,
        motion_records,
        tnet: tnet.model,
        fnet: fnet.model,
        tnet_logs: tnet.logs,
        fnet_logs: fnet.logs,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_fold_logs(path: &Path, tnet: &[EpochLog], fnet: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["net", "epoch", "train_loss", "val_loss", "val_acc"])?;
    for (net, logs) in [("tnet", tnet), ("fnet", fnet)] {
        for l in logs {
            w.write_record([
                net.to_string(),
                l.epoch.to_string(),
                format!("{:.6}", l.train_loss),
                format!("{:.6}", l.val_loss),
                format!("{:.6}", l.val_acc),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

pub fn save_fold(run_dir: &Path, out: &FoldOutput) -> Result<PathBuf> {
    let dir = fold_dir(run_dir, out.fold);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    out.tnet.save(&dir.join("tnet.ckpt"))?;
    out.fnet.save(&dir.join("fnet.ckpt"))?;
    write_jsonl(&dir.join("predictions.jsonl"), &out.records)?;
    write_jsonl(&dir.join("fnet_predictions.jsonl"), &out.motion_records)?;
    write_fold_logs(&dir.join("log.csv"), &out.tnet_logs, &out.fnet_logs)?;
    Ok(dir)
}

/// Method summaries for `tnet`, `fused` (7 classes) and `fnet` (3 classes).
pub fn aggregate(folds: &[(Vec<PredictionRecord>, Vec<MotionRecord>)]) -> Result<Aggregate> {
    let mut t = Vec::new();
    let mut i = Vec::new();
    let mut m = Vec::new();
    for (k, (records, motions)) in folds.iter().enumerate() {
        let fold = records.first().map_or(k, |r| r.fold);
        let tp: Vec<_> = records.iter().map(|r| (r.true_class as usize, r.t_pred as usize)).collect();
        let ip: Vec<_> = records.iter().map(|r| (r.true_class as usize, r.i_pred as usize)).collect();
        let mp: Vec<_> = motions.iter().map(|r| (r.true_motion as usize, r.f_pred as usize)).collect();
        t.push(FoldMetrics::from_pairs(fold, &tp, NUM_TOPOLOGIES)?);
        i.push(FoldMetrics::from_pairs(fold, &ip, NUM_TOPOLOGIES)?);
        m.push(FoldMetrics::from_pairs(fold, &mp, NUM_MOTIONS)?);
    }
    let agg = Aggregate {
        methods: vec![
            MethodSummary::new("tnet", NUM_TOPOLOGIES, t)?,
            MethodSummary::new("fused", NUM_TOPOLOGIES, i)?,
            MethodSummary::new("fnet", NUM_MOTIONS, m)?,
        ],
    };
    for s in &agg.methods {
        let mean = s.folds.iter().map(|f| f.accuracy).sum::<f64>() / s.folds.len() as f64;
        assert!((mean - s.mean_accuracy).abs() <= 1e-12);
    }
    Ok(agg)
}

/// Read every `fold<i>/` of a finished (or partial) run and aggregate.
pub fn load_run(run_dir: &Path) -> Result<Aggregate> {
    let mut folds = Vec::new();
    for k in 0.. {
        let dir = fold_dir(run_dir, k);
        if !dir.exists() {
            break;
        }
        folds.push((
            read_jsonl(&dir.join("predictions.jsonl"))?,
            read_jsonl(&dir.join("fnet_predictions.jsonl"))?,
        ));
    }
    if folds.is_empty() {
        return Err(Error::MissingFile(fold_dir(run_dir, 0)));
    }
    aggregate(&folds)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub run_dir: PathBuf,
    pub aggregate: Aggregate,
    pub folds: Vec<FoldPlan>,
}

/// Full k-fold run. Each fold's files are written as soon as it finishes;
/// if a fold fails, the folds so far are aggregated into
/// `aggregate.partial.json` and the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, observer: Option<&dyn PhaseObserver>) -> Result<ExperimentResult> {
    let cfg = cfg.clone().resolve()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let resolved = run_dir.join("config.resolved.toml");
    std::fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| Error::io(&resolved, e))?;

    let data = prepare(&cfg)?;
    let folds = make_folds(&data.dataset.intersections, cfg.split_ratio, cfg.folds, cfg.seed, cfg.split_scheme)?;
    save_folds(&run_dir.join("folds.json"), &folds)?;

    let mut done = Vec::new();
    for fold in &folds {
        log::info!("fold {}: training", fold.fold_index);
        match run_fold(&cfg, &data, fold, observer) {
            Ok(out) => {
                save_fold(&run_dir, &out)?;
                done.push((out.records, out.motion_records));
            }
            Err(e) => {
                if !done.is_empty() {
                    let partial = aggregate(&done)?;
                    let p = run_dir.join("aggregate.partial.json");
                    std::fs::write(&p, serde_json::to_string_pretty(&partial)? + "\n")
                        .map_err(|err| Error::io(&p, err))?;
                }
                return Err(e);
            }
        }
    }
    let agg = aggregate(&done)?;
    let p = run_dir.join("aggregate.json");
    let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    f.write_all((serde_json::to_string_pretty(&agg)? + "\n").as_bytes())
        .map_err(|e| Error::io(&p, e))?;
    Ok(ExperimentResult {
        run_dir,
        aggregate: agg,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::synthetic(Path::new("d"), Path::new("r"));
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("[tnet]"));
        assert!(text.contains("freeze_mode = \"between_pools\""));
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml_str("name = \"x\"\n[tnet]\nlr = 0.5\n").unwrap();
        assert_eq!(partial.tnet.hyper.lr, 0.5);
        assert_eq!(partial.tnet.model.input_size, 224);
        assert_eq!(partial.fnet.hyper.lr, 1e-5);
        assert_eq!(partial.fnet.hyper.weight_decay, 1e-6);
    }

    #[test]
    fn resolve_checks_folds_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::synthetic(dir.path(), dir.path());
        cfg.folds = 1;
        assert!(matches!(cfg.clone().resolve(), Err(Error::Config(_))));
        cfg.folds = 2;
        assert!(matches!(cfg.resolve(), Err(Error::MissingFile(_))));
    }

    #[test]
    fn derived_seeds_differ_per_fold() {
        let s: std::collections::BTreeSet<u64> = (0..10).map(|f| derive_seed(7, f)).collect();
        assert_eq!(s.len(), 10);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
