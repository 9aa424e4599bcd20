//! Fixed-length, pre-padded embedding sequences.

use std::path::PathBuf;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use super::colorize::colorize_flow;
use super::embed::FlowEmbedder;
use super::flow::{load_gray, FlowEstimator, GrayFrame};
use crate::error::{Error, Result};

pub const DEFAULT_SEQ_LEN: usize = 80;

/// `seq_len x dim` matrix whose leading rows may be zero padding.
/// Padded rows are exactly zero and all precede the valid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    vectors: Array2<f32>,
    valid_mask: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn new(vectors: Array2<f32>, valid_mask: Vec<bool>) -> Result<Self> {
        let seq = Self { vectors, valid_mask };
        seq.validate()?;
        Ok(seq)
    }

    /// Pre-pad `valid` rows with zero rows up to `seq_len`.
    pub fn pre_padded(valid: ArrayView2<f32>, seq_len: usize) -> Result<Self> {
        let n = valid.nrows();
        if n > seq_len {
            return Err(Error::InvalidSequence(format!(
                "{n} valid steps exceed the sequence length {seq_len}"
            )));
        }
        let mut vectors = Array2::<f32>::zeros((seq_len, valid.ncols()));
        vectors.slice_mut(s![seq_len - n.., ..]).assign(&valid);
        let valid_mask = (0..seq_len).map(|t| t >= seq_len - n).collect();
        Self::new(vectors, valid_mask)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSequence(m));
        if self.valid_mask.len() != self.vectors.nrows() {
            return bad(format!(
                "mask has {} steps, matrix has {} rows",
                self.valid_mask.len(),
                self.vectors.nrows()
            ));
        }
        if !self.valid_mask.windows(2).all(|w| w[0] <= w[1]) {
            return bad("valid steps must follow all padded steps".into());
        }
        if !self.valid_mask.iter().any(|&v| v) {
            return bad("no valid step".into());
        }
        for (t, row) in self.vectors.rows().into_iter().enumerate() {
            let zero = row.iter().all(|&x| x == 0.0);
            if zero == self.valid_mask[t] {
                return bad(format!(
                    "step {t}: {} row where the mask says {}",
                    if zero { "zero" } else { "non-zero" },
                    if self.valid_mask[t] { "valid" } else { "padding" }
                ));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return bad(format!("step {t}: non-finite value"));
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    /// The trailing valid rows.
    pub fn valid_steps(&self) -> ArrayView2<'_, f32> {
        let start = self.seq_len() - self.num_valid();
        self.vectors.slice(s![start.., ..])
    }
}

/// Encodes one consecutive frame pair into a feature vector.
pub trait StepEncoder: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn encode(&self, a: &GrayFrame, b: &GrayFrame) -> Result<Vec<f32>>;
}

/// Flow estimation, color coding, then the frozen embedder.
pub struct FlowEmbeddingPipeline<E> {
    pub estimator: E,
    pub embedder: FlowEmbedder,
}

impl<E: FlowEstimator> StepEncoder for FlowEmbeddingPipeline<E> {
    fn id(&self) -> String {
        format!("{}+{}", self.estimator.id(), self.embedder.id())
    }

    fn dim(&self) -> usize {
        self.embedder.dim()
    }

    fn encode(&self, a: &GrayFrame, b: &GrayFrame) -> Result<Vec<f32>> {
        let flow = self.estimator.estimate(a, b)?;
        self.embedder.embed_any_size(&colorize_flow(&flow))
    }
}

/// Index of the first frame of every pair that goes into the sequence.
/// `n` frames give `n - 1` pairs; more than `seq_len` pairs are subsampled
/// uniformly in time.
pub fn select_pairs(n_frames: usize, seq_len: usize) -> Vec<usize> {
    let pairs = n_frames.saturating_sub(1);
    if pairs <= seq_len {
        (0..pairs).collect()
    } else {
        (0..seq_len).map(|i| i * pairs / seq_len).collect()
    }
}

fn assemble(rows: Vec<Vec<f32>>, dim: usize, seq_len: usize) -> Result<EmbeddingSequence> {
    let n = rows.len();
    let mut valid = Array2::<f32>::zeros((n, dim));
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        valid.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    EmbeddingSequence::pre_padded(valid.view(), seq_len)
}

/// Build a sequence from in-memory frames. Pairs are encoded in parallel;
/// the result does not depend on the worker count.
pub fn build_sequence(
    frames: &[GrayFrame],
    encoder: &dyn StepEncoder,
    seq_len: usize,
) -> Result<EmbeddingSequence> {
    if frames.len() < 2 {
        return Err(Error::TooFewFrames(frames.len()));
    }
    let rows = select_pairs(frames.len(), seq_len)
        .par_iter()
        .map(|&i| encoder.encode(&frames[i], &frames[i + 1]))
        .collect::<Result<Vec<_>>>()?;
    assemble(rows, encoder.dim(), seq_len)
}

/// Like [`build_sequence`] but only decodes the frames that are used.
pub fn build_sequence_from_paths(
    frames: &[PathBuf],
    encoder: &dyn StepEncoder,
    seq_len: usize,
) -> Result<EmbeddingSequence> {
    if frames.len() < 2 {
        return Err(Error::TooFewFrames(frames.len()));
    }
    let rows = select_pairs(frames.len(), seq_len)
        .par_iter()
        .map(|&i| {
            let a = load_gray(&frames[i])?;
            let b = load_gray(&frames[i + 1])?;
            encoder.encode(&a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(rows, encoder.dim(), seq_len)
}
