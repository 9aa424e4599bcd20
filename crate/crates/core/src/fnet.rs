//! Ego-motion classifier: an LSTM over the valid steps of an embedding
//! sequence, dropout on its last hidden state, then a dense layer to the
//! three motion classes. The embedder upstream stays frozen; only the LSTM
//! and the dense head train.

use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfeat::EmbeddingSequence;
use crate::labels::{ClassPdf, EgoMotion, LabelSpace, NUM_MOTIONS};
use crate::nn::{
    dropout_mask, fit, load_model_tensors, model_to_file, softmax_cross_entropy, Dense, EpochLog, Lstm, Model,
    TensorMut, TensorRef, TrainHyper,
};
use crate::tensorfile::TensorFile;

const CHECKPOINT_KIND: &str = "fnet";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FNetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Dropout between the LSTM output and the dense head.
    pub dropout: f32,
    pub init_seed: u64,
}

impl Default for FNetConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::flowfeat::EMBED_DIM,
            hidden: 256,
            dropout: 0.5,
            init_seed: 0,
        }
    }
}

pub use crate::tnet::TrainMeta;

#[derive(Debug, Clone, PartialEq)]
pub struct FNet {
    pub config: FNetConfig,
    pub lstm: Lstm,
    pub head: Dense,
    pub train_meta: Option<TrainMeta>,
}

impl FNet {
    pub fn new(config: FNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        Self {
            config,
            lstm: Lstm::init(config.input_dim, config.hidden, &mut rng),
            head: Dense::glorot_init(config.hidden, NUM_MOTIONS, &mut rng),
            train_meta: None,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.head.outputs()
    }

    fn check_input(&self, seq: &EmbeddingSequence) -> Result<()> {
        if seq.dim() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                actual: seq.dim(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "train_meta": self.train_meta,
        });
        model_to_file(CHECKPOINT_KIND, meta, self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        if file.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("{} is not an F-Net checkpoint", path.display())));
        }
        let config: FNetConfig = serde_json::from_value(file.meta["config"].clone())?;
        let mut model = FNet::new(config);
        load_model_tensors(&file, &mut model)?;
        model.train_meta = serde_json::from_value(file.meta["train_meta"].clone())?;
        Ok(model)
    }
}

impl Model for FNet {
    type Input = EmbeddingSequence;

    fn num_classes(&self) -> usize {
        self.head.outputs()
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            lstm: self.lstm.zeros_like(),
            head: self.head.zeros_like(),
            train_meta: None,
        }
    }

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let t = |name: &str, shape: Vec<usize>, data| TensorRef {
            name: name.to_string(),
            shape,
            data,
        };
        vec![
            t("lstm.w_x", self.lstm.w_x.shape().to_vec(), self.lstm.w_x.as_slice().expect("contiguous")),
            t("lstm.w_h", self.lstm.w_h.shape().to_vec(), self.lstm.w_h.as_slice().expect("contiguous")),
            t("lstm.b", vec![self.lstm.bias.len()], self.lstm.bias.as_slice().expect("contiguous")),
            t("head.w", self.head.weight.shape().to_vec(), self.head.weight.as_slice().expect("contiguous")),
            t("head.b", vec![self.head.bias.len()], self.head.bias.as_slice().expect("contiguous")),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let t = |name: &str, data| TensorMut {
            name: name.to_string(),
            data,
        };
        vec![
            t("lstm.w_x", self.lstm.w_x.as_slice_mut().expect("contiguous")),
            t("lstm.w_h", self.lstm.w_h.as_slice_mut().expect("contiguous")),
            t("lstm.b", self.lstm.bias.as_slice_mut().expect("contiguous")),
            t("head.w", self.head.weight.as_slice_mut().expect("contiguous")),
            t("head.b", self.head.bias.as_slice_mut().expect("contiguous")),
        ]
    }

    fn is_trainable(&self, _name: &str) -> bool {
        true
    }

    /// Padded steps are skipped, so the LSTM starts from a zero state at the
    /// first valid step regardless of how much padding precedes it.
    fn logits(&self, seq: &EmbeddingSequence) -> Vec<f32> {
        let (h, _) = self.lstm.forward(seq.valid_steps());
        self.head.forward(h.view()).to_vec()
    }

    fn accumulate_gradient(
        &self,
        seq: &EmbeddingSequence,
        label: usize,
        dropout: Option<&mut ChaCha8Rng>,
        grads: &mut Self,
    ) -> f64 {
        let (h, cache) = self.lstm.forward(seq.valid_steps());
        let mask = dropout.map(|rng| Array1::from_vec(dropout_mask(rng, h.len(), self.config.dropout)));
        let hd = match &mask {
            Some(m) => &h * m,
            None => h,
        };
        let logits = self.head.forward(hd.view());
        let (loss, dlogits) = softmax_cross_entropy(logits.as_slice().expect("contiguous"), label);
        let mut dh = self.head.backward(hd.view(), ArrayView1::from(&dlogits), Some(&mut grads.head));
        if let Some(m) = &mask {
            dh *= m;
        }
        self.lstm.backward(&cache, &dh, &mut grads.lstm);
        loss
    }
}

#[derive(Debug, Clone)]
pub struct FNetTraining {
    pub model: FNet,
    pub logs: Vec<EpochLog>,
}

fn fnet_labels<'a>(model: &FNet, set: &'a [(EmbeddingSequence, EgoMotion)]) -> Result<Vec<(&'a EmbeddingSequence, usize)>> {
    set.iter()
        .map(|(s, m)| {
            model.check_input(s)?;
            Ok((s, m.id() - 1))
        })
        .collect()
}

/// Train on `(sequence, motion)` pairs; keeps the best-validation weights.
pub fn train_fnet(
    model: FNet,
    train: &[(EmbeddingSequence, EgoMotion)],
    val: &[(EmbeddingSequence, EgoMotion)],
    hyper: &TrainHyper,
) -> Result<FNetTraining> {
    let tr = fnet_labels(&model, train)?;
    let va = fnet_labels(&model, val)?;
    let outcome = fit(model.clone(), &tr, &va, hyper)?;
    let mut model = outcome.model;
    model.train_meta = Some(TrainMeta {
        seed: hyper.seed,
        lr: hyper.lr,
        weight_decay: hyper.weight_decay,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        frozen_checksum: String::new(),
    });
    Ok(FNetTraining {
        model,
        logs: outcome.logs,
    })
}

/// Ego-motion PDF (straight, left, right) for one sequence.
pub fn predict_fnet(model: &FNet, seq: &EmbeddingSequence) -> Result<ClassPdf> {
    model.check_input(seq)?;
    seq.validate()?;
    ClassPdf::softmax(&model.logits(seq), LabelSpace::Egomotion3)
}
