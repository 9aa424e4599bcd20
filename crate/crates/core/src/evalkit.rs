//! Top-1 accuracy, confusion matrices, and report files.
//!
//! Labels are 1-based everywhere in this module. Per-class accuracy is
//! recall: the diagonal entry over its row sum.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t-1][p-1]` = number of samples with true class `t` predicted `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    fn check(&self, label: usize) -> Result<usize> {
        if label == 0 || label > self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                max: self.num_classes(),
            });
        }
        Ok(label - 1)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let (t, p) = (self.check(truth)?, self.check(pred)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth - 1][pred - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth - 1].iter().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    /// Recall per class; `None` for classes absent from the evaluated set.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (1..=self.num_classes())
            .map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                actual: other.num_classes(),
            });
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

/// Fraction of `(truth, prediction)` pairs that agree.
pub fn top1_accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no records to score"));
    }
    let hits = pairs.iter().filter(|(t, p)| t == p).count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn confusion(pairs: &[(usize, usize)], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for &(t, p) in pairs {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl FoldMetrics {
    pub fn from_pairs(fold: usize, pairs: &[(usize, usize)], num_classes: usize) -> Result<Self> {
        let confusion = confusion(pairs, num_classes)?;
        Ok(Self {
            fold,
            samples: pairs.len(),
            accuracy: top1_accuracy(pairs)?,
            per_class: confusion.per_class_recall(),
            confusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub num_classes: usize,
    pub folds: Vec<FoldMetrics>,
    /// Mean of the per-fold accuracies.
    pub mean_accuracy: f64,
    /// Per-class recall of the summed confusion matrix.
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl MethodSummary {
    pub fn new(method: &str, num_classes: usize, folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Empty("method has no folds"));
        }
        let mut total = ConfusionMatrix::new(num_classes);
        for f in &folds {
            total.merge(&f.confusion)?;
        }
        let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
        Ok(Self {
            method: method.to_string(),
            num_classes,
            per_class: total.per_class_recall(),
            confusion: total,
            mean_accuracy,
            folds,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub methods: Vec<MethodSummary>,
}

impl Aggregate {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub table_csv: PathBuf,
    pub table_txt: PathBuf,
    pub summary_json: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

const REPORT_CLASSES: usize = 7;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn table_csv(agg: &Aggregate) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "fold".into(), "accuracy".into()];
    header.extend((1..=REPORT_CLASSES).map(|c| format!("per_class_{c}")));
    w.write_record(&header)?;
    for m in &agg.methods {
        let rows = m
            .folds
            .iter()
            .map(|f| (f.fold.to_string(), f.accuracy, &f.per_class))
            .chain(std::iter::once(("mean".to_string(), m.mean_accuracy, &m.per_class)));
        for (fold, acc, per_class) in rows {
            let mut rec = vec![m.method.clone(), fold, format!("{acc:.6}")];
            rec.extend((0..REPORT_CLASSES).map(|c| fmt_opt(per_class.get(c).copied().flatten())));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn table_txt(agg: &Aggregate) -> String {
    let mut s = String::new();
    let folds = agg.methods.iter().map(|m| m.folds.len()).max().unwrap_or(0);
    let _ = write!(s, "{:<8}", "method");
    for f in 0..folds {
        let _ = write!(s, " {:>8}", format!("fold{f}"));
    }
    let _ = writeln!(s, " {:>8}", "mean");
    for m in &agg.methods {
        let _ = write!(s, "{:<8}", m.method);
        for f in &m.folds {
            let _ = write!(s, " {:>8.4}", f.accuracy);
        }
        for _ in m.folds.len()..folds {
            let _ = write!(s, " {:>8}", "");
        }
        let _ = writeln!(s, " {:>8.4}", m.mean_accuracy);
    }
    for m in &agg.methods {
        let _ = writeln!(s, "\n{} confusion (rows = true, columns = predicted)", m.method);
        for row in &m.confusion.counts {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
    }
    s
}

/// Row-normalised heatmap, white (0) to dark blue (1), 32 px per cell.
pub fn render_heatmap(cm: &ConfusionMatrix) -> RgbImage {
    const CELL: u32 = 32;
    let n = cm.num_classes() as u32;
    let mut img = RgbImage::from_pixel(n * CELL, n * CELL, Rgb([255, 255, 255]));
    for t in 0..n as usize {
        let sum = cm.counts[t].iter().sum::<u64>().max(1) as f64;
        for p in 0..n as usize {
            let v = cm.counts[t][p] as f64 / sum;
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let color = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            for y in 1..CELL - 1 {
                for x in 1..CELL - 1 {
                    img.put_pixel(p as u32 * CELL + x, t as u32 * CELL + y, color);
                }
            }
        }
    }
    img
}

/// Write `accuracy.csv`, `accuracy.txt`, `summary.json` and one
/// `confusion_<method>.png` per method into `out_dir`.
pub fn emit_report(agg: &Aggregate, out_dir: &Path) -> Result<ReportFiles> {
    if agg.methods.is_empty() {
        return Err(Error::Empty("aggregate has no methods"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let table_csv = write("accuracy.csv", table_csv(agg)?)?;
    let table_txt = write("accuracy.txt", table_txt(agg))?;
    let summary_json = write("summary.json", serde_json::to_string_pretty(agg)? + "\n")?;
    let mut heatmaps = Vec::new();
    for m in &agg.methods {
        let p = out_dir.join(format!("confusion_{}.png", m.method));
        render_heatmap(&m.confusion).save(&p)?;
        heatmaps.push(p);
    }
    Ok(ReportFiles {
        table_csv,
        table_txt,
        summary_json,
        heatmaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[(1, 1), (2, 2)]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[(1, 2), (2, 1)]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[(1, 1), (2, 2), (3, 3), (4, 5)]).unwrap(), 0.75);
        assert!(matches!(top1_accuracy(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[(2, 5)], 7).unwrap();
        assert_eq!(cm.get(2, 5), 1);
        assert_eq!(cm.total(), 1);
        let perfect = confusion(&[(1, 1), (3, 3), (7, 7)], 7).unwrap();
        for t in 1..=7 {
            for p in 1..=7 {
                if t != p {
                    assert_eq!(perfect.get(t, p), 0);
                }
            }
        }
        assert!(matches!(confusion(&[(8, 1)], 7), Err(Error::LabelOutOfRange { label: 8, .. })));
        assert!(matches!(confusion(&[(1, 0)], 7), Err(Error::LabelOutOfRange { label: 0, .. })));
    }

    fn sample_aggregate() -> Aggregate {
        let a = FoldMetrics::from_pairs(0, &[(1, 1), (2, 3), (7, 7)], 7).unwrap();
        let b = FoldMetrics::from_pairs(1, &[(4, 4), (5, 5)], 7).unwrap();
        let f = FoldMetrics::from_pairs(0, &[(1, 1), (2, 2)], 3).unwrap();
        Aggregate {
            methods: vec![
                MethodSummary::new("tnet", 7, vec![a.clone(), b.clone()]).unwrap(),
                MethodSummary::new("fused", 7, vec![a, b]).unwrap(),
                MethodSummary::new("fnet", 3, vec![f]).unwrap(),
            ],
        }
    }

    #[test]
    fn mean_is_mean_of_folds() {
        let agg = sample_aggregate();
        let m = agg.method("tnet").unwrap();
        assert!((m.mean_accuracy - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(m.confusion.total(), 5);
    }

    #[test]
    fn report_files_are_stable() {
        let agg = sample_aggregate();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&agg, dir.path()).unwrap();
        assert_eq!(files.heatmaps.len(), 3);
        let csv1 = std::fs::read(&files.table_csv).unwrap();
        let json1 = std::fs::read(&files.summary_json).unwrap();
        emit_report(&agg, dir.path()).unwrap();
        assert_eq!(std::fs::read(&files.table_csv).unwrap(), csv1);
        assert_eq!(std::fs::read(&files.summary_json).unwrap(), json1);
        let text = String::from_utf8(csv1).unwrap();
        assert!(text.starts_with("method,fold,accuracy,per_class_1,"));
        // 2 + mean for each 7-class method, 1 + mean for the 3-class one
        assert_eq!(text.lines().count(), 1 + 3 + 3 + 2);
        assert!(matches!(
            emit_report(&Aggregate::default(), dir.path()),
            Err(Error::Empty(_))
        ));
    }

    proptest! {
        #[test]
        fn matches_naive_tally(pairs in proptest::collection::vec((1usize..=7, 1usize..=7), 1..200)) {
            let cm = confusion(&pairs, 7).unwrap();
            for t in 1..=7 {
                for p in 1..=7 {
                    let naive = pairs.iter().filter(|&&(a, b)| a == t && b == p).count() as u64;
                    prop_assert_eq!(cm.get(t, p), naive);
                }
                let in_class = pairs.iter().filter(|&&(a, _)| a == t).count() as u64;
                prop_assert_eq!(cm.row_sum(t), in_class);
            }
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            let acc = top1_accuracy(&pairs).unwrap();
            prop_assert!((cm.accuracy().unwrap() - acc).abs() < 1e-12);
        }
    }
}
