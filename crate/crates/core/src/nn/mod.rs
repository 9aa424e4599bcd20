//! Minimal CPU network kernels: im2col convolution, max pooling, dense
//! layers, a masked LSTM, Adam, and a mini-batch training loop with early
//! stopping. Everything runs single-threaded in f32 and is bit-for-bit
//! deterministic for a fixed seed.

mod adam;
mod conv;
mod dense;
mod fit;
mod lstm;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, MaxPool2};
pub use dense::Dense;
pub use fit::{
    evaluate, fit, load_model_tensors, model_to_file, train_step, write_log_csv, EpochLog, FitOutcome,
    Model, TrainHyper,
};
pub use lstm::{Lstm, LstmCache};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A named, shaped view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f32],
}

/// Draw `n` values from N(0, std^2).
pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) fn relu_inplace(xs: &mut [f32]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zero `dy` where the forward activation was clipped.
pub(crate) fn relu_backward(dy: &mut [f32], activated: &[f32]) {
    for (g, &a) in dy.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Inverted dropout; returns the keep-mask scale per element (0 or 1/keep).
pub(crate) fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f32) -> Vec<f32> {
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Softmax cross-entropy for one sample. Returns the loss (f64) and the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f64, Vec<f32>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (e / sum - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    (loss, grad)
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
