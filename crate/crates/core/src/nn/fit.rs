use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, softmax_cross_entropy, Adam, AdamConfig, TensorMut, TensorRef};
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;

/// A classifier that can be trained by [`fit`]. Gradients are stored in a
/// value of the model type itself (see [`Model::zeros_like`]).
pub trait Model: Clone {
    type Input: ?Sized;

    fn num_classes(&self) -> usize;
    fn zeros_like(&self) -> Self;
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;
    fn is_trainable(&self, name: &str) -> bool;

    /// Inference-mode logits.
    fn logits(&self, input: &Self::Input) -> Vec<f32>;

    /// Forward + backward for one sample with a 0-based `label`; adds the
    /// parameter gradients into `grads` and returns the loss. Dropout is
    /// active iff `dropout` is given.
    fn accumulate_gradient(
        &self,
        input: &Self::Input,
        label: usize,
        dropout: Option<&mut ChaCha8Rng>,
        grads: &mut Self,
    ) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-6,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome<M> {
    /// Weights from the epoch with the lowest validation loss.
    pub model: M,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Mean cross-entropy and top-1 accuracy in inference mode.
pub fn evaluate<M: Model>(model: &M, samples: &[(&M::Input, usize)]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (input, label) in samples {
        let logits = model.logits(input);
        loss += softmax_cross_entropy(&logits, *label).0;
        if argmax(&logits) == *label {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Run one optimizer step on `batch` and return its mean training loss.
pub fn train_step<M: Model>(
    model: &mut M,
    optimizer: &mut Adam,
    batch: &[(&M::Input, usize)],
    dropout: Option<&mut ChaCha8Rng>,
) -> f64 {
    let trainable: HashSet<String> = model
        .tensors()
        .into_iter()
        .filter(|t| model.is_trainable(&t.name))
        .map(|t| t.name)
        .collect();
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    let mut dropout = dropout;
    for (input, label) in batch {
        loss += model.accumulate_gradient(input, *label, dropout.as_deref_mut(), &mut grads);
    }
    let scale = 1.0 / batch.len() as f32;
    for t in grads.tensors_mut() {
        t.data.iter_mut().for_each(|g| *g *= scale);
    }
    optimizer.step(model.tensors_mut(), grads.tensors(), |n| trainable.contains(n));
    loss / batch.len() as f64
}

/// Mini-batch Adam with early stopping on validation loss. Restores the
/// best-validation weights before returning.
pub fn fit<M: Model>(
    model: M,
    train: &[(&M::Input, usize)],
    val: &[(&M::Input, usize)],
    hyper: &TrainHyper,
) -> Result<FitOutcome<M>> {
    for class in 0..model.num_classes() {
        if !train.iter().any(|(_, l)| *l == class) {
            return Err(Error::EmptyClass(class + 1));
        }
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let batch_size = hyper.batch_size.max(1);
    let mut model = model;
    let mut optimizer = Adam::new(hyper.adam());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_d20f);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut logs = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=hyper.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<(&M::Input, usize)> = chunk.iter().map(|&i| train[i]).collect();
            let loss = train_step(&mut model, &mut optimizer, &batch, Some(&mut dropout_rng));
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            total += loss * batch.len() as f64;
        }
        let (val_loss, val_acc) = evaluate(&model, val);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: usize::MAX });
        }
        logs.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_acc,
        });
        log::debug!("epoch {epoch}: val_loss {val_loss:.5} val_acc {val_acc:.3}");
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }

    Ok(FitOutcome {
        model: best,
        logs,
        best_epoch,
        epochs_run,
    })
}

/// Write `epoch,train_loss,val_loss,val_acc` rows.
pub fn write_log_csv(path: &std::path::Path, logs: &[EpochLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for log in logs {
        w.serialize(log)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every parameter tensor of `model`, in [`Model::tensors`] order.
pub fn model_to_file<M: Model>(kind: &str, meta: serde_json::Value, model: &M) -> TensorFile {
    let mut file = TensorFile::new(kind, meta);
    for t in model.tensors() {
        file.push(t.name, t.shape, t.data.to_vec());
    }
    file
}

/// Overwrite the parameters of an already-shaped `model` from `file`.
pub fn load_model_tensors<M: Model>(file: &TensorFile, model: &mut M) -> Result<()> {
    for t in model.tensors_mut() {
        file.copy_into(&t.name, t.data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::ArrayView1;

    /// Multinomial logistic regression.
    #[derive(Clone)]
    struct Linear(Dense);

    impl Model for Linear {
        type Input = [f32];
        fn num_classes(&self) -> usize {
            self.0.outputs()
        }
        fn zeros_like(&self) -> Self {
            Linear(self.0.zeros_like())
        }
        fn tensors(&self) -> Vec<TensorRef<'_>> {
            vec![
                TensorRef {
                    name: "w".into(),
                    shape: self.0.weight.shape().to_vec(),
                    data: self.0.weight.as_slice().unwrap(),
                },
                TensorRef {
                    name: "b".into(),
                    shape: vec![self.0.bias.len()],
                    data: self.0.bias.as_slice().unwrap(),
                },
            ]
        }
        fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
            vec![
                TensorMut {
                    name: "w".into(),
                    data: self.0.weight.as_slice_mut().unwrap(),
                },
                TensorMut {
                    name: "b".into(),
                    data: self.0.bias.as_slice_mut().unwrap(),
                },
            ]
        }
        fn is_trainable(&self, _: &str) -> bool {
            true
        }
        fn logits(&self, x: &[f32]) -> Vec<f32> {
            self.0.forward(ArrayView1::from(x)).to_vec()
        }
        fn accumulate_gradient(&self, x: &[f32], label: usize, _: Option<&mut ChaCha8Rng>, g: &mut Self) -> f64 {
            let (loss, d) = softmax_cross_entropy(&self.logits(x), label);
            self.0.backward(ArrayView1::from(x), ArrayView1::from(&d), Some(&mut g.0));
            loss
        }
    }

    fn data() -> Vec<(Vec<f32>, usize)> {
        (0..30)
            .map(|i| {
                let c = i % 3;
                let mut x = vec![0.1 * (i as f32 % 5.0); 3];
                x[c] += 2.0;
                (x, c)
            })
            .collect()
    }

    fn model() -> Linear {
        Linear(Dense::glorot_init(3, 3, &mut ChaCha8Rng::seed_from_u64(1)))
    }

    #[test]
    fn fit_learns_and_is_deterministic() {
        let d = data();
        let set: Vec<(&[f32], usize)> = d.iter().map(|(x, c)| (x.as_slice(), *c)).collect();
        let hyper = TrainHyper {
            lr: 0.05,
            max_epochs: 60,
            ..TrainHyper::default()
        };
        let a = fit(model(), &set, &set, &hyper).unwrap();
        let b = fit(model(), &set, &set, &hyper).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.model.0, b.model.0);
        assert_eq!(evaluate(&a.model, &set).1, 1.0);
        let best = a.logs.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.logs[a.best_epoch - 1].val_loss, best);
    }

    #[test]
    fn fit_rejects_missing_class_and_empty_val() {
        let d = data();
        let set: Vec<(&[f32], usize)> = d.iter().filter(|(_, c)| *c != 1).map(|(x, c)| (x.as_slice(), *c)).collect();
        assert!(matches!(fit(model(), &set, &set, &TrainHyper::default()), Err(Error::EmptyClass(2))));
        let all: Vec<(&[f32], usize)> = d.iter().map(|(x, c)| (x.as_slice(), *c)).collect();
        assert!(matches!(fit(model(), &all, &[], &TrainHyper::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let d = data();
        let set: Vec<(&[f32], usize)> = d.iter().map(|(x, c)| (x.as_slice(), *c)).collect();
        let mut m = model();
        m.0.weight[[0, 0]] = f32::NAN;
        assert!(matches!(
            fit(m, &set, &set, &TrainHyper::default()),
            Err(Error::NonFiniteLoss { epoch: 1, step: 0 })
        ));
    }

    #[test]
    fn checkpoint_helpers_round_trip() {
        let m = model();
        let file = model_to_file("linear", serde_json::json!({}), &m);
        let mut other = Linear(m.0.zeros_like());
        load_model_tensors(&file, &mut other).unwrap();
        assert_eq!(other.0, m.0);
    }
}
