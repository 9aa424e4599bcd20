//! Annotation ingestion, k-fold plans over intersections, and (T, F) pairing.
//!
//! Annotation CSV columns:
//!
//! ```text
//! kind,intersection_id,topology,drive_id,frame_start,frame_end,d2i_start,d2i_end,egomotion,lat,lon
//! ```
//!
//! `kind` is `T` (one image, `frame_start` and `d2i_start` = capture D2I) or
//! `F` (frames `frame_start..=frame_end`, D2I at both ends, `egomotion` is a
//! name or id). `lat`/`lon` are optional. Frames live at
//! `<root>/<drive_id>/image_02/data/<frame:010>.png`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{D2iConfig, EgoMotion, NUM_TOPOLOGIES};

pub fn frame_path(root: &Path, drive_id: &str, frame: u64) -> PathBuf {
    root.join(drive_id)
        .join("image_02")
        .join("data")
        .join(format!("{frame:010}.png"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    T,
    F,
}

/// One row of the annotation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub kind: SampleKind,
    pub intersection_id: String,
    pub topology: u8,
    pub drive_id: String,
    pub frame_start: u64,
    pub frame_end: Option<u64>,
    pub d2i_start: f64,
    pub d2i_end: Option<f64>,
    pub egomotion: Option<String>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
}

pub fn write_annotations(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionRecord {
    pub intersection_id: String,
    pub topology: u8,
    pub drive_id: String,
    /// Frame at which the vehicle enters the intersection (D2I = 0),
    /// interpolated from the F rows, or the T frame when there is none.
    pub frame_of_entry: u64,
    pub geo_hint: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleT {
    pub intersection_id: String,
    pub topology: u8,
    pub image_path: PathBuf,
    pub capture_d2i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleF {
    pub intersection_id: String,
    pub topology: u8,
    pub frame_paths: Vec<PathBuf>,
    pub egomotion: EgoMotion,
    pub start_d2i: f64,
    pub end_d2i: f64,
}

impl SampleF {
    /// Stable identifier used as the embedding cache key.
    pub fn key(&self) -> String {
        let first = self
            .frame_paths
            .first()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}_{}", self.intersection_id, first)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub sample_t: SampleT,
    pub sample_f: SampleF,
    pub topology: u8,
    /// The F sequence was borrowed from another intersection of the same class.
    pub reused: bool,
}

impl SamplePair {
    pub fn sample_id(&self) -> String {
        let stem = self
            .sample_t
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{}", self.sample_t.intersection_id, stem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub intersection_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub intersections: Vec<IntersectionRecord>,
    pub samples_t: Vec<SampleT>,
    pub samples_f: Vec<SampleF>,
    /// Rows skipped for D2I violations (default mode only).
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Fail on the first D2I violation instead of skipping the row.
    pub strict: bool,
}

fn in_range(x: f64, (lo, hi): (f64, f64)) -> bool {
    x >= lo && x <= hi
}

/// Read and validate an annotation file against the dataset root.
pub fn ingest(root: &Path, annotation_file: &Path, d2i: &D2iConfig, opts: IngestOptions) -> Result<Dataset> {
    d2i.validate()?;
    if !annotation_file.exists() {
        return Err(Error::MissingFile(annotation_file.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(annotation_file)?;

    let mut samples_t = Vec::new();
    let mut samples_f = Vec::new();
    let mut diagnostics = Vec::new();
    let mut meta: BTreeMap<String, (u8, String, Option<(f64, f64)>, usize)> = BTreeMap::new();
    let mut t_frames: HashMap<String, u64> = HashMap::new();
    let mut entry_frames: HashMap<String, u64> = HashMap::new();

    for (i, row) in reader.deserialize::<AnnotationRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            line,
            message: e.to_string(),
        })?;
        let malformed = |message: String| Error::MalformedRow { line, message };
        if row.intersection_id.is_empty() {
            return Err(malformed("empty intersection_id".into()));
        }
        if !(1..=NUM_TOPOLOGIES as u8).contains(&row.topology) {
            return Err(malformed(format!("topology {} outside 1..=7", row.topology)));
        }
        let geo = row.lat.zip(row.lon);
        match meta.get(&row.intersection_id) {
            Some((topo, drive, _, first)) if *topo != row.topology || *drive != row.drive_id => {
                return Err(malformed(format!(
                    "intersection {} conflicts with line {first} (topology/drive)",
                    row.intersection_id
                )));
            }
            Some(_) => {}
            None => {
                meta.insert(
                    row.intersection_id.clone(),
                    (row.topology, row.drive_id.clone(), geo, line),
                );
            }
        }

        let violation = match row.kind {
            SampleKind::T => (!in_range(row.d2i_start, d2i.t_range()))
                .then(|| format!("capture_d2i {} outside {:?}", row.d2i_start, d2i.t_range())),
            SampleKind::F => {
                let end = row
                    .d2i_end
                    .ok_or_else(|| malformed("F row without d2i_end".into()))?;
                if !in_range(row.d2i_start, d2i.f_start_range()) {
                    Some(format!("start_d2i {} outside {:?}", row.d2i_start, d2i.f_start_range()))
                } else if !in_range(end, d2i.f_end_range()) {
                    Some(format!("end_d2i {end} outside {:?}", d2i.f_end_range()))
                } else {
                    None
                }
            }
        };
        if let Some(message) = violation {
            if opts.strict {
                return Err(Error::D2iOutOfRange {
                    line,
                    intersection_id: row.intersection_id,
                    message,
                });
            }
            log::warn!("line {line} ({}): skipped, {message}", row.intersection_id);
            diagnostics.push(Diagnostic {
                line,
                intersection_id: row.intersection_id,
                message,
            });
            continue;
        }

        match row.kind {
            SampleKind::T => {
                let e = t_frames.entry(row.intersection_id.clone()).or_insert(row.frame_start);
                *e = (*e).min(row.frame_start);
                samples_t.push(SampleT {
                    image_path: frame_path(root, &row.drive_id, row.frame_start),
                    intersection_id: row.intersection_id,
                    topology: row.topology,
                    capture_d2i: row.d2i_start,
                });
            }
            SampleKind::F => {
                let end_frame = row
                    .frame_end
                    .ok_or_else(|| malformed("F row without frame_end".into()))?;
                if end_frame < row.frame_start {
                    return Err(malformed(format!(
                        "frame_end {end_frame} before frame_start {}",
                        row.frame_start
                    )));
                }
                let egomotion = row
                    .egomotion
                    .as_deref()
                    .and_then(EgoMotion::parse)
                    .ok_or_else(|| malformed(format!("bad egomotion {:?}", row.egomotion)))?;
                let end_d2i = row.d2i_end.unwrap_or_default();
                let span = end_d2i - row.d2i_start;
                let frac = if span > 0.0 { -row.d2i_start / span } else { 0.0 };
                let entry = row.frame_start + ((end_frame - row.frame_start) as f64 * frac).round() as u64;
                let e = entry_frames.entry(row.intersection_id.clone()).or_insert(entry);
                *e = (*e).min(entry);
                samples_f.push(SampleF {
                    frame_paths: (row.frame_start..=end_frame)
                        .map(|f| frame_path(root, &row.drive_id, f))
                        .collect(),
                    intersection_id: row.intersection_id,
                    topology: row.topology,
                    egomotion,
                    start_d2i: row.d2i_start,
                    end_d2i,
                });
            }
        }
    }

    let missing = samples_t
        .par_iter()
        .map(|s| &s.image_path)
        .chain(samples_f.par_iter().flat_map(|s| s.frame_paths.par_iter()))
        .filter(|p| !p.exists())
        .min()
        .cloned();
    if let Some(path) = missing {
        return Err(Error::MissingFile(path));
    }

    samples_t.sort_by(|a, b| {
        (&a.intersection_id, &a.image_path).cmp(&(&b.intersection_id, &b.image_path))
    });
    samples_f.sort_by(|a, b| {
        (&a.intersection_id, &a.frame_paths).cmp(&(&b.intersection_id, &b.frame_paths))
    });
    diagnostics.sort_by(|a, b| (&a.intersection_id, a.line).cmp(&(&b.intersection_id, b.line)));

    let used: BTreeSet<&String> = samples_t
        .iter()
        .map(|s| &s.intersection_id)
        .chain(samples_f.iter().map(|s| &s.intersection_id))
        .collect();
    let intersections = meta
        .iter()
        .filter(|(id, _)| used.contains(id))
        .map(|(id, (topology, drive_id, geo, _))| IntersectionRecord {
            intersection_id: id.clone(),
            topology: *topology,
            drive_id: drive_id.clone(),
            frame_of_entry: entry_frames
                .get(id)
                .or_else(|| t_frames.get(id))
                .copied()
                .unwrap_or_default(),
            geo_hint: *geo,
        })
        .collect();

    Ok(Dataset {
        intersections,
        samples_t,
        samples_f,
        diagnostics,
    })
}

/// How folds relate to each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Every fold is an independent stratified split under its own seed.
    #[default]
    Resampled,
    /// One shuffle; fold `f` starts its test window at `f * n / k` within
    /// each class and wraps around, so test sets rotate through the data.
    Rotating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl FoldPlan {
    /// Disjointness of the three partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let pairs = [
            (&self.train, &self.val, "train", "val"),
            (&self.train, &self.test, "train", "test"),
            (&self.val, &self.test, "val", "test"),
        ];
        for (x, y, a, b) in pairs {
            if let Some(id) = x.intersection(y).next() {
                return Err(Error::Leakage {
                    fold: self.fold_index,
                    intersection_id: id.clone(),
                    a,
                    b,
                });
            }
        }
        Ok(())
    }

    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        if self.train.contains(id) {
            Some(Partition::Train)
        } else if self.val.contains(id) {
            Some(Partition::Val)
        } else if self.test.contains(id) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, p: Partition) -> &BTreeSet<String> {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

pub fn save_folds(path: &Path, folds: &[FoldPlan]) -> Result<()> {
    let json = serde_json::to_string_pretty(folds)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_folds(path: &Path) -> Result<Vec<FoldPlan>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// Split `n` items by `ratio` with the largest-remainder method, so every
/// share is within one item of its exact quota and the shares sum to `n`.
pub fn quotas(n: usize, ratio: (u32, u32, u32)) -> [usize; 3] {
    let r = [ratio.0 as usize, ratio.1 as usize, ratio.2 as usize];
    let total: usize = r.iter().sum();
    let mut q = [0usize; 3];
    let mut rem = [0usize; 3];
    for i in 0..3 {
        q[i] = n * r[i] / total;
        rem[i] = n * r[i] % total;
    }
    let mut left = n - q.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // stable: ties go to the earlier partition
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    q
}

/// Stratified k-fold plans over intersections. Each class is split
/// train:val:test by `ratio`; see [`SplitScheme`] for how folds differ.
pub fn make_folds(
    records: &[IntersectionRecord],
    ratio: (u32, u32, u32),
    k: usize,
    seed: u64,
    scheme: SplitScheme,
) -> Result<Vec<FoldPlan>> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if ratio.0 == 0 || ratio.2 == 0 {
        return Err(Error::Config(format!("ratio {ratio:?} needs train and test shares")));
    }
    let mut by_class: BTreeMap<u8, Vec<String>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.topology).or_default().push(r.intersection_id.clone());
    }
    for class in 1..=NUM_TOPOLOGIES as u8 {
        let available = by_class.get(&class).map_or(0, |v| v.len());
        if available < k {
            return Err(Error::TooFewIntersections {
                class,
                available,
                required: k,
            });
        }
    }
    for ids in by_class.values_mut() {
        ids.sort();
        ids.dedup();
    }

    let mut folds: Vec<FoldPlan> = (0..k)
        .map(|fold_index| FoldPlan {
            fold_index,
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
        })
        .collect();
    for (&class, ids) in &by_class {
        let n = ids.len();
        let [n_train, n_val, n_test] = quotas(n, ratio);
        debug_assert_eq!(n_train + n_val + n_test, n);
        let class_seed = seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut once = ids.clone();
        once.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed));
        for (f, plan) in folds.iter_mut().enumerate() {
            let order: Vec<&String> = match scheme {
                SplitScheme::Resampled => {
                    let mut v: Vec<&String> = ids.iter().collect();
                    v.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed.wrapping_add(f as u64 + 1)));
                    v
                }
                SplitScheme::Rotating => {
                    let start = f * n / k;
                    (0..n).map(|i| &once[(start + i) % n]).collect()
                }
            };
            let (test, rest) = order.split_at(n_test);
            let (val, train) = rest.split_at(n_val);
            plan.test.extend(test.iter().map(|s| (*s).clone()));
            plan.val.extend(val.iter().map(|s| (*s).clone()));
            plan.train.extend(train.iter().map(|s| (*s).clone()));
        }
    }
    for plan in &folds {
        plan.check_disjoint()?;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldPairs {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl FoldPairs {
    pub fn get(&self, p: Partition) -> &[SamplePair] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Pair every input-T sample of the fold with an input-F sample from the
/// same partition: the same intersection when possible, otherwise a
/// same-class sequence chosen round-robin in intersection-id order.
pub fn make_pairs(fold: &FoldPlan, samples_t: &[SampleT], samples_f: &[SampleF]) -> Result<FoldPairs> {
    let mut out = FoldPairs::default();
    for part in Partition::ALL {
        let ids = fold.ids(part);
        let mut ts: Vec<&SampleT> = samples_t.iter().filter(|s| ids.contains(&s.intersection_id)).collect();
        ts.sort_by(|a, b| (&a.intersection_id, &a.image_path).cmp(&(&b.intersection_id, &b.image_path)));
        let mut fs: Vec<&SampleF> = samples_f.iter().filter(|s| ids.contains(&s.intersection_id)).collect();
        fs.sort_by(|a, b| (&a.intersection_id, &a.frame_paths).cmp(&(&b.intersection_id, &b.frame_paths)));

        let mut own: HashMap<&str, Vec<&SampleF>> = HashMap::new();
        let mut by_class: HashMap<u8, Vec<&SampleF>> = HashMap::new();
        for f in &fs {
            own.entry(f.intersection_id.as_str()).or_default().push(f);
            by_class.entry(f.topology).or_default().push(f);
        }
        let mut own_next: HashMap<&str, usize> = HashMap::new();
        let mut class_next: HashMap<u8, usize> = HashMap::new();
        let pairs = match part {
            Partition::Train => &mut out.train,
            Partition::Val => &mut out.val,
            Partition::Test => &mut out.test,
        };
        for t in ts {
            let (f, reused) = if let Some(list) = own.get(t.intersection_id.as_str()) {
                let i = own_next.entry(t.intersection_id.as_str()).or_default();
                let f = list[*i % list.len()];
                *i += 1;
                (f, false)
            } else {
                let list = by_class.get(&t.topology).ok_or_else(|| Error::NoEligibleSequence {
                    class: t.topology,
                    partition: part.name().to_string(),
                })?;
                let i = class_next.entry(t.topology).or_default();
                let f = list[*i % list.len()];
                *i += 1;
                (f, true)
            };
            pairs.push(SamplePair {
                sample_t: t.clone(),
                sample_f: f.clone(),
                topology: t.topology,
                reused,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(per_class: &[usize]) -> Vec<IntersectionRecord> {
        per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |j| IntersectionRecord {
                    intersection_id: format!("c{}_{j:03}", c + 1),
                    topology: c as u8 + 1,
                    drive_id: format!("d{c}"),
                    frame_of_entry: 0,
                    geo_hint: None,
                })
            })
            .collect()
    }

    fn t_row(id: &str, topo: u8, frame: u64, d2i: f64) -> AnnotationRow {
        AnnotationRow {
            kind: SampleKind::T,
            intersection_id: id.into(),
            topology: topo,
            drive_id: format!("drive_{id}"),
            frame_start: frame,
            frame_end: None,
            d2i_start: d2i,
            d2i_end: None,
            egomotion: None,
            lat: None,
            lon: None,
        }
    }

    fn f_row(id: &str, topo: u8, start: u64, end: u64, motion: &str) -> AnnotationRow {
        AnnotationRow {
            kind: SampleKind::F,
            frame_end: Some(end),
            d2i_start: -2.0,
            d2i_end: Some(6.0),
            egomotion: Some(motion.into()),
            ..t_row(id, topo, start, 0.0)
        }
    }

    fn touch_frames(root: &Path, rows: &[AnnotationRow]) {
        for r in rows {
            for f in r.frame_start..=r.frame_end.unwrap_or(r.frame_start) {
                let p = frame_path(root, &r.drive_id, f);
                std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                std::fs::write(&p, b"").unwrap();
            }
        }
    }

    fn setup(rows: &[AnnotationRow]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        touch_frames(dir.path(), rows);
        let csv = dir.path().join("annotations.csv");
        write_annotations(&csv, rows).unwrap();
        (dir, csv)
    }

    #[test]
    fn ingest_preserves_reference_class_counts() {
        let counts = [42usize, 46, 46, 79, 43, 72, 82];
        let rows: Vec<AnnotationRow> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |j| t_row(&format!("c{}_{j}", c + 1), c as u8 + 1, 3, -10.0)))
            .collect();
        assert_eq!(rows.len(), 410);
        let (dir, csv) = setup(&rows);
        let ds = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()).unwrap();
        assert_eq!(ds.samples_t.len(), 410);
        for (c, &n) in counts.iter().enumerate() {
            assert_eq!(ds.samples_t.iter().filter(|s| s.topology == c as u8 + 1).count(), n);
        }
        assert_eq!(ds.intersections.len(), 410);
    }

    #[test]
    fn empty_annotation_is_empty_dataset() {
        let (dir, csv) = setup(&[]);
        std::fs::write(
            &csv,
            "kind,intersection_id,topology,drive_id,frame_start,frame_end,d2i_start,d2i_end,egomotion,lat,lon\n",
        )
        .unwrap();
        let ds = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()).unwrap();
        assert_eq!(ds, Dataset::default());
    }

    #[test]
    fn d2i_violation_skipped_or_fatal() {
        let rows = vec![t_row("a", 1, 0, -20.0), t_row("b", 1, 0, -10.0)];
        let (dir, csv) = setup(&rows);
        let ds = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()).unwrap();
        assert_eq!(ds.samples_t.len(), 1);
        assert_eq!(ds.diagnostics.len(), 1);
        assert_eq!(ds.diagnostics[0].intersection_id, "a");
        assert_eq!(ds.diagnostics[0].line, 2);
        let err = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions { strict: true }).unwrap_err();
        assert!(matches!(err, Error::D2iOutOfRange { line: 2, .. }));
    }

    #[test]
    fn f_rows_and_entry_frame() {
        let rows = vec![t_row("a", 4, 10, -8.0), f_row("a", 4, 20, 28, "right")];
        let (dir, csv) = setup(&rows);
        let ds = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()).unwrap();
        let f = &ds.samples_f[0];
        assert_eq!(f.frame_paths.len(), 9);
        assert_eq!(f.egomotion, EgoMotion::Right);
        assert!(f.frame_paths[0].ends_with("drive_a/image_02/data/0000000020.png"));
        // d2i -2 -> 6 over frames 20..28: zero crossing at a quarter
        assert_eq!(ds.intersections[0].frame_of_entry, 22);
    }

    #[test]
    fn malformed_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), &dir.path().join("none.csv"), &D2iConfig::default(), IngestOptions::default()),
            Err(Error::MissingFile(_))
        ));
        let csv = dir.path().join("bad.csv");
        std::fs::write(
            &csv,
            "kind,intersection_id,topology,drive_id,frame_start,frame_end,d2i_start,d2i_end,egomotion,lat,lon\nT,a,nine,d,0,,-10,,,,\n",
        )
        .unwrap();
        assert!(matches!(
            ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        // referenced image missing
        write_annotations(&csv, &[t_row("a", 1, 0, -10.0)]).unwrap();
        assert!(matches!(
            ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn ingest_is_order_insensitive() {
        let rows = vec![
            t_row("b", 2, 1, -9.0),
            f_row("a", 1, 5, 9, "straight"),
            t_row("a", 1, 1, -12.0),
            t_row("c", 7, 2, -6.0),
        ];
        let (dir, csv) = setup(&rows);
        let ds1 = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        write_annotations(&csv, &rev).unwrap();
        let ds2 = ingest(dir.path(), &csv, &D2iConfig::default(), IngestOptions::default()).unwrap();
        assert_eq!(ds1, ds2);
    }

    #[test]
    fn ten_per_class_gives_5_2_3() {
        let recs = records(&[10; 7]);
        let folds = make_folds(&recs, (5, 2, 3), 5, 7, SplitScheme::Resampled).unwrap();
        assert_eq!(folds.len(), 5);
        for plan in &folds {
            for class in 1..=7u8 {
                let count = |s: &BTreeSet<String>| s.iter().filter(|id| id.starts_with(&format!("c{class}_"))).count();
                assert_eq!((count(&plan.train), count(&plan.val), count(&plan.test)), (5, 2, 3));
            }
            let union: BTreeSet<_> = plan.train.iter().chain(&plan.val).chain(&plan.test).collect();
            assert_eq!(union.len(), 70);
        }
        assert_eq!(folds, make_folds(&recs, (5, 2, 3), 5, 7, SplitScheme::Resampled).unwrap());
        assert_ne!(folds[0], make_folds(&recs, (5, 2, 3), 5, 8, SplitScheme::Resampled).unwrap()[0]);
    }

    #[test]
    fn rotating_scheme_covers_every_intersection_in_test() {
        let recs = records(&[10; 7]);
        let folds = make_folds(&recs, (5, 2, 3), 5, 1, SplitScheme::Rotating).unwrap();
        let tested: BTreeSet<_> = folds.iter().flat_map(|f| f.test.iter()).collect();
        assert_eq!(tested.len(), 70);
    }

    #[test]
    fn too_few_per_class() {
        let recs = records(&[10, 10, 4, 10, 10, 10, 10]);
        assert!(matches!(
            make_folds(&recs, (5, 2, 3), 5, 0, SplitScheme::Resampled),
            Err(Error::TooFewIntersections { class: 3, available: 4, required: 5 })
        ));
    }

    #[test]
    fn quotas_examples() {
        assert_eq!(quotas(10, (5, 2, 3)), [5, 2, 3]);
        assert_eq!(quotas(42, (5, 2, 3)), [21, 8, 13]);
        assert_eq!(quotas(5, (5, 2, 3)), [3, 1, 1]);
    }

    fn st(id: &str, topo: u8) -> SampleT {
        SampleT {
            intersection_id: id.into(),
            topology: topo,
            image_path: PathBuf::from(format!("{id}.png")),
            capture_d2i: -10.0,
        }
    }

    fn sf(id: &str, topo: u8) -> SampleF {
        SampleF {
            intersection_id: id.into(),
            topology: topo,
            frame_paths: vec![PathBuf::from(format!("{id}_0.png")), PathBuf::from(format!("{id}_1.png"))],
            egomotion: EgoMotion::Straight,
            start_d2i: -1.0,
            end_d2i: 1.0,
        }
    }

    fn plan(train: &[&str], val: &[&str], test: &[&str]) -> FoldPlan {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        FoldPlan {
            fold_index: 0,
            train: set(train),
            val: set(val),
            test: set(test),
        }
    }

    #[test]
    fn pairing_examples() {
        let p = make_pairs(&plan(&["a"], &[], &[]), &[st("a", 1)], &[sf("a", 1)]).unwrap();
        assert_eq!(p.train.len(), 1);
        assert!(!p.train[0].reused);

        let ts = [st("x", 4), st("y", 4), st("z", 4), st("w", 4)];
        let p = make_pairs(&plan(&["w", "x", "y", "z"], &[], &[]), &ts, &[sf("w", 4)]).unwrap();
        assert_eq!(p.train.len(), 4);
        assert_eq!(p.train.iter().filter(|x| x.reused).count(), 3);
        assert!(p.train.iter().all(|x| x.sample_f.intersection_id == "w"));

        let err = make_pairs(&plan(&["a"], &["b"], &[]), &[st("a", 2), st("b", 2)], &[sf("a", 2)]).unwrap_err();
        assert!(matches!(err, Error::NoEligibleSequence { class: 2, .. }));
    }

    #[test]
    fn reuse_is_round_robin() {
        let ts = [st("a", 3), st("b", 3), st("c", 3), st("d", 3)];
        let fs = [sf("c", 3), sf("d", 3)];
        let p = make_pairs(&plan(&["a", "b", "c", "d"], &[], &[]), &ts, &fs).unwrap();
        let used: Vec<&str> = p.train.iter().map(|x| x.sample_f.intersection_id.as_str()).collect();
        assert_eq!(used, ["c", "d", "c", "d"]);
    }

    proptest! {
        #[test]
        fn folds_hold_invariants(seed in any::<u64>(), extra in proptest::collection::vec(0usize..8, 7), k in 2usize..6) {
            let counts: Vec<usize> = extra.iter().map(|e| k.max(5) + e).collect();
            let recs = records(&counts);
            for scheme in [SplitScheme::Resampled, SplitScheme::Rotating] {
                let folds = make_folds(&recs, (5, 2, 3), k, seed, scheme).unwrap();
                prop_assert_eq!(folds.len(), k);
                for plan in &folds {
                    prop_assert!(plan.check_disjoint().is_ok());
                    prop_assert_eq!(plan.train.len() + plan.val.len() + plan.test.len(), recs.len());
                    for (c, &n) in counts.iter().enumerate() {
                        let prefix = format!("c{}_", c + 1);
                        let exact = [n as f64 * 0.5, n as f64 * 0.2, n as f64 * 0.3];
                        for (set, q) in [&plan.train, &plan.val, &plan.test].iter().zip(exact) {
                            let got = set.iter().filter(|id| id.starts_with(&prefix)).count() as f64;
                            prop_assert!((got - q).abs() <= 1.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn pairs_never_cross_partitions(seed in any::<u64>()) {
            let recs = records(&[6; 7]);
            let folds = make_folds(&recs, (5, 2, 3), 3, seed, SplitScheme::Resampled).unwrap();
            let ts: Vec<SampleT> = recs.iter().map(|r| st(&r.intersection_id, r.topology)).collect();
            // only every other intersection has its own sequence
            let fs: Vec<SampleF> = recs.iter().step_by(2).map(|r| sf(&r.intersection_id, r.topology)).collect();
            for plan in &folds {
                if let Ok(pairs) = make_pairs(plan, &ts, &fs) {
                    for part in Partition::ALL {
                        for p in pairs.get(part) {
                            prop_assert_eq!(plan.partition_of(&p.sample_t.intersection_id), Some(part));
                            prop_assert_eq!(plan.partition_of(&p.sample_f.intersection_id), Some(part));
                            prop_assert_eq!(p.sample_t.topology, p.sample_f.topology);
                        }
                    }
                }
            }
        }
    }
}
