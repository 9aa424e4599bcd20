//! `icnet` command-line driver.
//!
//! Every subcommand exits 0 on success. On failure it prints a single JSON
//! line `{"error": <kind>, "message": <text>}` to stderr and exits 1 (2 for
//! usage errors).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use icnet::dataset::{make_folds, save_folds};
use icnet::flowfeat::{compute_flow, colorize_flow, load_gray, EmbeddingSequence};
use icnet::fnet::{predict_fnet, FNet};
use icnet::inet::{fuse_record, FusionInput, MaskMode};
use icnet::nn::write_log_csv;
use icnet::synth::{generate, SynthSpec};
use icnet::tnet::{load_image, predict_tnet, TNet};
use icnet::trainer::{
    extract_sequences, ingest_for, load_run, prepare, read_jsonl, run_experiment, train_fold_fnet,
    train_fold_tnet, write_jsonl, ExperimentConfig, CACHE_DIR_ENV,
};
use icnet::evalkit::emit_report;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "icnet", version, about = "Intersection classification from a scene view and an ego-motion flow sequence")]
struct Cli {
    /// Single worker thread; results are bit-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Embedding cache directory.
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Experiment config file plus the overrides most runs need.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    catalogue: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Start from the toy-dataset training preset instead of the defaults.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an annotation file against the frame tree; optionally write fold plans.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        strict: bool,
        /// Write fold plans to this JSON file.
        #[arg(long)]
        folds_out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset in the ingestion layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON spec; flags override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        t_per_class: Option<usize>,
        #[arg(long)]
        f_per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Color-coded optical flow for each consecutive frame pair.
    ExtractFlow {
        #[arg(long, num_args = 2.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build (or reuse) the embedding sequence of every F sample.
    ExtractFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fail instead of computing missing cache entries.
        #[arg(long)]
        no_recompute: bool,
    },
    /// Train the T-Net of one fold.
    TrainTnet {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the F-Net of one fold.
    TrainFnet {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict PDFs; writes one JSON line per sample.
    Predict {
        /// T-Net checkpoint; used with --image.
        #[arg(long, requires = "image")]
        tnet: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        image: Vec<PathBuf>,
        /// F-Net checkpoint; used with --frames.
        #[arg(long, requires = "frames")]
        fnet: Option<PathBuf>,
        /// Frames of one sequence, in order.
        #[arg(long, num_args = 2..)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
        #[arg(long)]
        embedder_seed: Option<u64>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse T-Net and F-Net PDFs joined on sample_id.
    Fuse {
        #[arg(long)]
        tnet_pdf: PathBuf,
        #[arg(long)]
        fnet_pdf: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        catalogue: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_parser = ["verbatim", "exclude_worst"])]
        mask_mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a run directory and write the report files.
    Evaluate {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full k-fold experiment.
    RunExperiment {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_config(args: &ConfigArgs, cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let mut cfg = if args.synthetic {
        let root = args.data_root.clone().unwrap_or_else(|| out_dir.join("synthetic_data"));
        ExperimentConfig::synthetic(&root, &out_dir)
    } else {
        ExperimentConfig::default()
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let top: toml::Value = toml::from_str(&text).map_err(|e| icnet::Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(&cfg).map_err(|e| icnet::Error::Config(e.to_string()))?;
        merge(&mut base, top);
        cfg = base.try_into().map_err(|e: toml::de::Error| icnet::Error::Config(e.to_string()))?;
    }
    if let Some(v) = &args.data_root {
        cfg.data_root = v.clone();
        if args.annotations.is_none() && args.config.is_none() {
            cfg.annotations = v.join("annotations.csv");
        }
    }
    if let Some(v) = &args.annotations {
        cfg.annotations = v.clone();
    }
    if let Some(v) = &args.catalogue {
        cfg.catalogue = Some(v.clone());
    }
    if let Some(v) = &args.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &args.name {
        cfg.name = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = &cli.cache_dir {
        cfg.features.cache_dir = Some(v.clone());
    }
    cfg.deterministic |= cli.deterministic;
    // with --synthetic and no dataset yet, generate the default one
    if args.synthetic && !cfg.annotations.exists() {
        let spec = SynthSpec::uniform(10, 10, cfg.seed);
        log::info!("generating synthetic dataset in {}", cfg.data_root.display());
        let out = generate(&spec, &cfg.data_root)?;
        cfg.annotations = out.annotations;
    }
    Ok(cfg.resolve()?)
}

fn emit_line<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// One predicted PDF; also the input format of `fuse`.
#[derive(Serialize, Deserialize)]
struct PdfLine {
    sample_id: String,
    pdf: Vec<f64>,
    top1: usize,
}

fn read_pdfs(path: &Path) -> anyhow::Result<BTreeMap<String, Vec<f64>>> {
    let rows: Vec<PdfLine> = read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r.sample_id.clone(), r.pdf).is_some() {
            bail!(icnet::Error::Format(format!("duplicate sample_id {} in {}", r.sample_id, path.display())));
        }
    }
    Ok(map)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest { cfg, strict, folds_out } => {
            let mut cfg = resolve_config(cfg, cli)?;
            cfg.strict_ingest |= strict;
            let ds = ingest_for(&cfg)?;
            for d in &ds.diagnostics {
                log::warn!("line {} ({}): {}", d.line, d.intersection_id, d.message);
            }
            let mut per_class = [0usize; 7];
            for r in &ds.intersections {
                per_class[r.topology as usize - 1] += 1;
            }
            if let Some(path) = folds_out {
                let folds = make_folds(&ds.intersections, cfg.split_ratio, cfg.folds, cfg.seed, cfg.split_scheme)?;
                save_folds(path, &folds)?;
            }
            emit_line(&serde_json::json!({
                "intersections": ds.intersections.len(),
                "samples_t": ds.samples_t.len(),
                "samples_f": ds.samples_f.len(),
                "per_class": per_class,
                "diagnostics": ds.diagnostics,
            }))
        }
        Command::Synth {
            out,
            spec,
            t_per_class,
            f_per_class,
            noise,
            seed,
        } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<SynthSpec>(&text)?
                }
                None => SynthSpec::uniform(10, 10, 0),
            };
            if let Some(n) = t_per_class {
                s.t_per_class = vec![*n; s.t_per_class.len()];
            }
            if let Some(n) = f_per_class {
                s.f_per_class = vec![*n; s.f_per_class.len()];
            }
            if let Some(v) = noise {
                s.noise = *v;
            }
            if let Some(v) = seed {
                s.seed = *v;
            }
            let o = generate(&s, out)?;
            emit_line(&serde_json::json!({
                "root": o.root,
                "annotations": o.annotations,
                "num_t": o.num_t,
                "num_f": o.num_f,
            }))
        }
        Command::ExtractFlow { frames, out } => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let mut prev = load_gray(&frames[0])?;
            for (i, path) in frames.iter().enumerate().skip(1) {
                let next = load_gray(path)?;
                let flow = compute_flow(&prev, &next)?;
                let dst = out.join(format!("flow_{:04}_{}.png", i - 1, file_stem(path)));
                colorize_flow(&flow).save_png(&dst)?;
                emit_line(&serde_json::json!({
                    "from": frames[i - 1],
                    "to": path,
                    "image": dst,
                    "max_magnitude": flow.max_magnitude(),
                }))?;
                prev = next;
            }
            Ok(())
        }
        Command::ExtractFeatures { cfg, no_recompute } => {
            let mut cfg = resolve_config(cfg, cli)?;
            cfg.features.allow_recompute &= !no_recompute;
            let ds = ingest_for(&cfg)?;
            let seqs = extract_sequences(&cfg, &ds.samples_f)?;
            emit_line(&serde_json::json!({
                "sequences": seqs.len(),
                "cache_dir": cfg.features.cache_dir,
            }))
        }
        Command::TrainTnet { cfg, fold, out } | Command::TrainFnet { cfg, fold, out } => {
            let cfg = resolve_config(cfg, cli)?;
            let data = prepare(&cfg)?;
            let folds = make_folds(&data.dataset.intersections, cfg.split_ratio, cfg.folds, cfg.seed, cfg.split_scheme)?;
            let plan = folds
                .get(*fold)
                .ok_or_else(|| icnet::Error::Config(format!("fold {fold} out of range 0..{}", folds.len())))?;
            let log_path = out.with_extension("log.csv");
            let (epochs, best) = if matches!(cli.command, Command::TrainTnet { .. }) {
                let t = train_fold_tnet(&cfg, &data, plan, None)?;
                t.model.save(out)?;
                write_log_csv(&log_path, &t.logs)?;
                let m = t.model.train_meta.clone().unwrap_or_default();
                (m.epochs_run, m.best_epoch)
            } else {
                let t = train_fold_fnet(&cfg, &data, plan, None)?;
                t.model.save(out)?;
                write_log_csv(&log_path, &t.logs)?;
                let m = t.model.train_meta.clone().unwrap_or_default();
                (m.epochs_run, m.best_epoch)
            };
            emit_line(&serde_json::json!({
                "checkpoint": out,
                "log": log_path,
                "epochs_run": epochs,
                "best_epoch": best,
            }))
        }
        Command::Predict {
            tnet,
            image,
            fnet,
            frames,
            sample_id,
            embedder_seed,
            seq_len,
            out,
        } => {
            let mut lines = Vec::new();
            if let Some(ckpt) = tnet {
                let model = TNet::load(ckpt)?;
                for p in image {
                    let x = load_image(p, model.config.input_size)?;
                    let pdf = predict_tnet(&model, &x)?;
                    lines.push(PdfLine {
                        sample_id: sample_id.clone().unwrap_or_else(|| file_stem(p)),
                        top1: pdf.top1(),
                        pdf: pdf.values().to_vec(),
                    });
                }
            }
            if let Some(ckpt) = fnet {
                let model = FNet::load(ckpt)?;
                let encoder = icnet::flowfeat::default_pipeline(embedder_seed.unwrap_or(0));
                let seq: EmbeddingSequence = icnet::flowfeat::build_sequence_from_paths(
                    frames,
                    &encoder,
                    seq_len.unwrap_or(icnet::flowfeat::DEFAULT_SEQ_LEN),
                )?;
                let pdf = predict_fnet(&model, &seq)?;
                lines.push(PdfLine {
                    sample_id: sample_id.clone().unwrap_or_else(|| file_stem(&frames[0])),
                    top1: pdf.top1(),
                    pdf: pdf.values().to_vec(),
                });
            }
            if tnet.is_none() && fnet.is_none() {
                bail!(icnet::Error::Config("predict needs --tnet with --image or --fnet with --frames".into()));
            }
            match out {
                Some(p) => write_jsonl(p, &lines)?,
                None => lines.iter().try_for_each(emit_line)?,
            }
            Ok(())
        }
        Command::Fuse {
            tnet_pdf,
            fnet_pdf,
            config,
            catalogue,
            threshold,
            mask_mode,
            out,
        } => {
            let mut fusion = match config {
                Some(p) => ExperimentConfig::load(p)?.fusion,
                None => Default::default(),
            };
            if let Some(p) = catalogue {
                fusion.consistency = icnet::Catalogue::load(p)?.consistency();
            }
            if let Some(t) = threshold {
                fusion.top1_threshold = *t;
            }
            if let Some(m) = mask_mode {
                fusion.mask_mode = if m == "exclude_worst" { MaskMode::ExcludeWorst } else { MaskMode::Verbatim };
            }
            fusion.validate()?;
            let t = read_pdfs(tnet_pdf)?;
            let f = read_pdfs(fnet_pdf)?;
            let mut records = Vec::new();
            for (id, t_out) in &t {
                let f_out = f
                    .get(id)
                    .ok_or_else(|| icnet::Error::Format(format!("{id} has no F-Net PDF in {}", fnet_pdf.display())))?;
                records.push(fuse_record(
                    &FusionInput {
                        sample_id: id.clone(),
                        t_out: t_out.clone(),
                        f_out: f_out.clone(),
                    },
                    &fusion,
                )?);
            }
            if let Some(id) = f.keys().find(|k| !t.contains_key(*k)) {
                bail!(icnet::Error::Format(format!("{id} has no T-Net PDF in {}", tnet_pdf.display())));
            }
            match out {
                Some(p) => write_jsonl(p, &records)?,
                None => records.iter().try_for_each(emit_line)?,
            }
            Ok(())
        }
        Command::Evaluate { run_dir, out } => {
            let agg = load_run(run_dir)?;
            let dir = out.clone().unwrap_or_else(|| run_dir.join("report"));
            let files = emit_report(&agg, &dir)?;
            let means: BTreeMap<_, _> = agg.methods.iter().map(|m| (m.method.clone(), m.mean_accuracy)).collect();
            emit_line(&serde_json::json!({
                "report": dir,
                "table": files.table_csv,
                "heatmaps": files.heatmaps,
                "mean_accuracy": means,
            }))
        }
        Command::RunExperiment { cfg } => {
            let cfg = resolve_config(cfg, cli)?;
            let result = run_experiment(&cfg, None)?;
            let per_fold: BTreeMap<_, _> = result
                .aggregate
                .methods
                .iter()
                .map(|m| (m.method.clone(), m.folds.iter().map(|f| f.accuracy).collect::<Vec<_>>()))
                .collect();
            let means: BTreeMap<_, _> = result
                .aggregate
                .methods
                .iter()
                .map(|m| (m.method.clone(), m.mean_accuracy))
                .collect();
            emit_line(&serde_json::json!({
                "run_dir": result.run_dir,
                "aggregate": result.run_dir.join("aggregate.json"),
                "mean_accuracy": means,
                "fold_accuracy": per_fold,
            }))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<icnet::Error>() {
        return e.kind();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return "json";
    }
    "other"
}

fn error_line(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            error_line("other", &e.to_string());
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
