//! Single-view topology classifier: a VGG16-layout conv backbone (five
//! blocks of 3x3 convs, each closed by a 2x2 max pool) whose classifier is
//! replaced by 512 -> 128 -> 7 fully connected layers.
//!
//! The backbone comes from a snapshot file. Part of it is frozen according
//! to [`FreezeMode`]; frozen tensors never change during training, which is
//! checked with a SHA-256 checksum.

use std::ops::RangeInclusive;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{ClassPdf, LabelSpace, NUM_TOPOLOGIES};
use crate::nn::{
    dropout_mask, fit, load_model_tensors, model_to_file, relu_backward, relu_inplace,
    softmax_cross_entropy, Conv2d, Dense, EpochLog, MaxPool2, Model, TensorMut, TensorRef,
    TrainHyper,
};
use crate::tensorfile::TensorFile;

pub const TNET_INPUT_SIZE: usize = 224;
pub const HEAD_WIDTHS: (usize, usize) = (512, 128);

const VGG16_CONVS: [usize; 5] = [2, 2, 3, 3, 3];
const VGG16_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const BACKBONE_KIND: &str = "vgg_backbone";
const CHECKPOINT_KIND: &str = "tnet";

/// Which conv blocks are frozen. Blocks are numbered 1..=5; block `b` ends
/// with max pool `b`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Blocks 2-4: the layers after pool 1 up to and including pool 4.
    #[default]
    BetweenPools,
    /// Blocks 1-4: everything up to pool 4.
    Blocks1To4,
}

impl FreezeMode {
    /// Frozen blocks, 1-based.
    pub fn frozen_blocks(self) -> RangeInclusive<usize> {
        match self {
            FreezeMode::BetweenPools => 2..=4,
            FreezeMode::Blocks1To4 => 1..=4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BackboneMeta {
    id: String,
    /// `(in, out)` channels of every conv, per block.
    blocks: Vec<Vec<(usize, usize)>>,
}

/// Convolutional part of the network; `blocks[b]` is followed by a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub id: String,
    pub blocks: Vec<Vec<Conv2d>>,
}

impl Backbone {
    /// VGG16 layout with every channel count divided by `width_divisor`,
    /// He-initialised from `seed`.
    pub fn vgg16(width_divisor: usize, seed: u64) -> Self {
        let div = width_divisor.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let blocks = VGG16_CONVS
            .iter()
            .zip(VGG16_CHANNELS)
            .map(|(&n, ch)| {
                let cout = (ch / div).max(1);
                (0..n)
                    .map(|_| {
                        let conv = Conv2d::he_init(cin, cout, 3, 1, 1, &mut rng);
                        cin = cout;
                        conv
                    })
                    .collect()
            })
            .collect();
        Self {
            id: format!("vgg16-w{div}/seed{seed}/v1"),
            blocks,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .and_then(|b| b.last())
            .map_or(0, |c| c.out_channels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BackboneMeta {
            id: self.id.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|c| (c.in_channels, c.out_channels)).collect())
                .collect(),
        };
        let mut file = TensorFile::new(BACKBONE_KIND, serde_json::to_value(meta)?);
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, c) in block.iter().enumerate() {
                file.push(
                    format!("block{}.conv{}.w", b + 1, i + 1),
                    vec![c.out_channels, c.in_channels, 3, 3],
                    c.weight.iter().copied().collect(),
                );
                file.push(format!("block{}.conv{}.b", b + 1, i + 1), vec![c.out_channels], c.bias.to_vec());
            }
        }
        file.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path).map_err(|e| match e {
            Error::MissingFile(p) => Error::BackboneUnavailable(p.display().to_string()),
            other => other,
        })?;
        if file.kind != BACKBONE_KIND {
            return Err(Error::BackboneUnavailable(format!(
                "{} is a {} file, not a conv backbone",
                path.display(),
                file.kind
            )));
        }
        let meta: BackboneMeta = serde_json::from_value(file.meta.clone())?;
        let mut blocks = Vec::new();
        for (b, convs) in meta.blocks.iter().enumerate() {
            let mut block = Vec::new();
            for (i, &(cin, cout)) in convs.iter().enumerate() {
                let w = file.get(&format!("block{}.conv{}.w", b + 1, i + 1))?;
                let bias = file.get(&format!("block{}.conv{}.b", b + 1, i + 1))?;
                block.push(Conv2d {
                    weight: Array2::from_shape_vec((cout, cin * 9), w.data.clone())
                        .map_err(|e| Error::Format(e.to_string()))?,
                    bias: Array1::from_vec(bias.data.clone()),
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
            }
            blocks.push(block);
        }
        Ok(Self { id: meta.id, blocks })
    }

    /// Five pooled blocks of chained 3x3 "same" convolutions on RGB input.
    fn check_structure(&self) -> Result<()> {
        if self.blocks.len() != VGG16_CONVS.len() {
            return Err(Error::BackboneStructure(format!(
                "expected {} pooled blocks, found {}",
                VGG16_CONVS.len(),
                self.blocks.len()
            )));
        }
        let mut cin = 3;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::BackboneStructure(format!("block {} has no conv", b + 1)));
            }
            for c in block {
                if c.in_channels != cin || c.kernel != 3 || c.stride != 1 || c.padding != 1 {
                    return Err(Error::BackboneStructure(format!(
                        "block {}: conv {}->{} k{} s{} p{} does not chain as a 3x3 same conv",
                        b + 1,
                        c.in_channels,
                        c.out_channels,
                        c.kernel,
                        c.stride,
                        c.padding
                    )));
                }
                cin = c.out_channels;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TNetConfig {
    pub input_size: usize,
    pub freeze_mode: FreezeMode,
    /// Dropout between the 512 and 128 layers.
    pub dropout: f32,
    pub head_seed: u64,
}

impl Default for TNetConfig {
    fn default() -> Self {
        Self {
            input_size: TNET_INPUT_SIZE,
            freeze_mode: FreezeMode::default(),
            dropout: 0.5,
            head_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub frozen_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TNet {
    pub backbone_id: String,
    pub config: TNetConfig,
    pub blocks: Vec<Vec<Conv2d>>,
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
    pub train_meta: Option<TrainMeta>,
}

/// Attach the 512 -> 128 -> 7 head to `backbone` and mark the frozen blocks.
pub fn build_tnet(backbone: &Backbone, config: TNetConfig) -> Result<TNet> {
    backbone.check_structure()?;
    let pools = backbone.blocks.len();
    if config.input_size == 0 || config.input_size % (1 << pools) != 0 {
        return Err(Error::Config(format!(
            "input size {} must be a positive multiple of {}",
            config.input_size,
            1 << pools
        )));
    }
    let side = config.input_size >> pools;
    let features = backbone.out_channels() * side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(config.head_seed);
    Ok(TNet {
        backbone_id: backbone.id.clone(),
        config,
        blocks: backbone.blocks.clone(),
        fc1: Dense::he_init(features, HEAD_WIDTHS.0, &mut rng),
        fc2: Dense::he_init(HEAD_WIDTHS.0, HEAD_WIDTHS.1, &mut rng),
        out: Dense::glorot_init(HEAD_WIDTHS.1, NUM_TOPOLOGIES, &mut rng),
        train_meta: None,
    })
}

/// Load a snapshot file and build the model on it.
pub fn build_tnet_from_snapshot(path: &Path, config: TNetConfig) -> Result<TNet> {
    build_tnet(&Backbone::load(path)?, config)
}

fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("block")?.split('.').next()?.parse().ok()
}

struct ConvCache {
    col: Array2<f32>,
    input_dim: (usize, usize, usize),
    activated: Array3<f32>,
}

struct BlockCache {
    convs: Vec<ConvCache>,
    pool_idx: Vec<usize>,
    pool_input: (usize, usize, usize),
}

impl TNet {
    pub fn head_widths(&self) -> (usize, usize) {
        (self.fc1.outputs(), self.fc2.outputs())
    }

    pub fn num_outputs(&self) -> usize {
        self.out.outputs()
    }

    pub fn is_block_frozen(&self, block: usize) -> bool {
        self.config.freeze_mode.frozen_blocks().contains(&block)
    }

    /// Names of all frozen parameter tensors.
    pub fn frozen_tensor_names(&self) -> Vec<String> {
        self.tensors()
            .into_iter()
            .filter(|t| !self.is_trainable(&t.name))
            .map(|t| t.name)
            .collect()
    }

    /// SHA-256 over the names and little-endian bytes of the frozen tensors.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            if self.is_trainable(&t.name) {
                continue;
            }
            h.update(t.name.as_bytes());
            for v in t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let s = self.config.input_size;
        if x.dim() != (3, s, s) {
            let (_, h, w) = x.dim();
            return Err(Error::WrongInputSize {
                expected: (s, s),
                actual: (h, w),
            });
        }
        Ok(())
    }

    fn features(&self, x: &Array3<f32>) -> Array1<f32> {
        let mut h = x.clone();
        for block in &self.blocks {
            for conv in block {
                h = conv.infer(&h);
                relu_inplace(h.as_slice_mut().expect("contiguous"));
            }
            h = MaxPool2::forward(&h).0;
        }
        let n = h.len();
        h.into_shape_with_order(n).expect("flatten")
    }

    fn head(&self, f: ArrayView1<f32>) -> Vec<f32> {
        let mut a1 = self.fc1.forward(f);
        relu_inplace(a1.as_slice_mut().expect("contiguous"));
        let mut a2 = self.fc2.forward(a1.view());
        relu_inplace(a2.as_slice_mut().expect("contiguous"));
        self.out.forward(a2.view()).to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "backbone_id": self.backbone_id,
            "config": self.config,
            "blocks": self.blocks.iter()
                .map(|b| b.iter().map(|c| (c.in_channels, c.out_channels)).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "train_meta": self.train_meta,
        });
        model_to_file(CHECKPOINT_KIND, meta, self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        if file.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("{} is not a T-Net checkpoint", path.display())));
        }
        let config: TNetConfig = serde_json::from_value(file.meta["config"].clone())?;
        let blocks: Vec<Vec<(usize, usize)>> = serde_json::from_value(file.meta["blocks"].clone())?;
        let backbone = Backbone {
            id: serde_json::from_value(file.meta["backbone_id"].clone())?,
            blocks: blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|&(cin, cout)| Conv2d {
                            weight: Array2::zeros((cout, cin * 9)),
                            bias: Array1::zeros(cout),
                            in_channels: cin,
                            out_channels: cout,
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                        })
                        .collect()
                })
                .collect(),
        };
        let mut model = build_tnet(&backbone, config)?;
        load_model_tensors(&file, &mut model)?;
        model.train_meta = serde_json::from_value(file.meta["train_meta"].clone())?;
        Ok(model)
    }
}

impl Model for TNet {
    type Input = Array3<f32>;

    fn num_classes(&self) -> usize {
        self.out.outputs()
    }

    fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(Conv2d::zeros_like).collect())
                .collect(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            out: self.out.zeros_like(),
            train_meta: None,
            ..self.clone()
        }
    }

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, c) in block.iter().enumerate() {
                v.push(TensorRef {
                    name: format!("block{}.conv{}.w", b + 1, i + 1),
                    shape: vec![c.out_channels, c.in_channels, 3, 3],
                    data: c.weight.as_slice().expect("contiguous"),
                });
                v.push(TensorRef {
                    name: format!("block{}.conv{}.b", b + 1, i + 1),
                    shape: vec![c.out_channels],
                    data: c.bias.as_slice().expect("contiguous"),
                });
            }
        }
        for (name, d) in [("fc1", &self.fc1), ("fc2", &self.fc2), ("out", &self.out)] {
            v.push(TensorRef {
                name: format!("{name}.w"),
                shape: d.weight.shape().to_vec(),
                data: d.weight.as_slice().expect("contiguous"),
            });
            v.push(TensorRef {
                name: format!("{name}.b"),
                shape: vec![d.bias.len()],
                data: d.bias.as_slice().expect("contiguous"),
            });
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (i, c) in block.iter_mut().enumerate() {
                v.push(TensorMut {
                    name: format!("block{}.conv{}.w", b + 1, i + 1),
                    data: c.weight.as_slice_mut().expect("contiguous"),
                });
                v.push(TensorMut {
                    name: format!("block{}.conv{}.b", b + 1, i + 1),
                    data: c.bias.as_slice_mut().expect("contiguous"),
                });
            }
        }
        for (name, d) in [("fc1", &mut self.fc1), ("fc2", &mut self.fc2), ("out", &mut self.out)] {
            v.push(TensorMut {
                name: format!("{name}.w"),
                data: d.weight.as_slice_mut().expect("contiguous"),
            });
            v.push(TensorMut {
                name: format!("{name}.b"),
                data: d.bias.as_slice_mut().expect("contiguous"),
            });
        }
        v
    }

    fn is_trainable(&self, name: &str) -> bool {
        block_of(name).is_none_or(|b| !self.is_block_frozen(b))
    }

    fn logits(&self, x: &Array3<f32>) -> Vec<f32> {
        self.head(self.features(x).view())
    }

    fn accumulate_gradient(
        &self,
        x: &Array3<f32>,
        label: usize,
        dropout: Option<&mut ChaCha8Rng>,
        grads: &mut Self,
    ) -> f64 {
        // forward, keeping what the backward pass needs
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let mut convs = Vec::with_capacity(block.len());
            for conv in block {
                let input_dim = h.dim();
                let (mut y, col) = conv.forward(&h);
                relu_inplace(y.as_slice_mut().expect("contiguous"));
                h = y.clone();
                convs.push(ConvCache {
                    col,
                    input_dim,
                    activated: y,
                });
            }
            let pool_input = h.dim();
            let (p, pool_idx) = MaxPool2::forward(&h);
            h = p;
            caches.push(BlockCache {
                convs,
                pool_idx,
                pool_input,
            });
        }
        let feat_dim = h.dim();
        let f0 = h.into_shape_with_order(feat_dim.0 * feat_dim.1 * feat_dim.2).expect("flatten");
        let mut a1 = self.fc1.forward(f0.view());
        relu_inplace(a1.as_slice_mut().expect("contiguous"));
        let mask = dropout.map(|rng| Array1::from_vec(dropout_mask(rng, a1.len(), self.config.dropout)));
        let d1 = match &mask {
            Some(m) => &a1 * m,
            None => a1.clone(),
        };
        let mut a2 = self.fc2.forward(d1.view());
        relu_inplace(a2.as_slice_mut().expect("contiguous"));
        let logits = self.out.forward(a2.view());
        let (loss, dlogits) = softmax_cross_entropy(logits.as_slice().expect("contiguous"), label);

        // backward
        let mut g = self.out.backward(a2.view(), ArrayView1::from(&dlogits), Some(&mut grads.out));
        relu_backward(g.as_slice_mut().expect("contiguous"), a2.as_slice().expect("contiguous"));
        let mut g = self.fc2.backward(d1.view(), g.view(), Some(&mut grads.fc2));
        if let Some(m) = &mask {
            g *= m;
        }
        relu_backward(g.as_slice_mut().expect("contiguous"), a1.as_slice().expect("contiguous"));
        let g = self.fc1.backward(f0.view(), g.view(), Some(&mut grads.fc1));

        // the lowest trainable block bounds how far the gradient must travel
        let lowest = (1..=self.blocks.len())
            .find(|&b| !self.is_block_frozen(b))
            .expect("at least one trainable block");
        let mut dy = g.into_shape_with_order(feat_dim).expect("unflatten");
        for (bi, (block, cache)) in self.blocks.iter().zip(&caches).enumerate().rev() {
            let b = bi + 1;
            if b < lowest {
                break;
            }
            dy = MaxPool2::backward(&dy, &cache.pool_idx, cache.pool_input);
            let frozen = self.is_block_frozen(b);
            for (ci, (conv, cc)) in block.iter().zip(&cache.convs).enumerate().rev() {
                relu_backward(
                    dy.as_slice_mut().expect("contiguous"),
                    cc.activated.as_slice().expect("contiguous"),
                );
                let need_dx = !(b == lowest && ci == 0);
                let gconv = (!frozen).then(|| &mut grads.blocks[bi][ci]);
                match conv.backward(&cc.col, &dy, cc.input_dim, gconv, need_dx) {
                    Some(dx) => dy = dx,
                    None => break,
                }
            }
        }
        loss
    }
}

/// Decode an image, resize it (aspect-distorting) to `size` x `size` and
/// apply per-channel ImageNet normalisation. Returns CHW.
pub fn load_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb32f();
    Ok(preprocess(&img, size))
}

pub fn preprocess(img: &image::Rgb32FImage, size: usize) -> Array3<f32> {
    let resized = if img.dimensions() == (size as u32, size as u32) {
        img.clone()
    } else {
        image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    };
    let mut x = Array3::<f32>::zeros((3, size, size));
    for (px, py, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            x[[c, py as usize, px as usize]] = (p[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct TNetTraining {
    pub model: TNet,
    pub logs: Vec<EpochLog>,
}

fn to_zero_based<'a>(samples: &'a [(Array3<f32>, u8)], model: &TNet) -> Result<Vec<(&'a Array3<f32>, usize)>> {
    samples
        .iter()
        .map(|(x, label)| {
            model.check_input(x)?;
            if !(1..=NUM_TOPOLOGIES as u8).contains(label) {
                return Err(Error::LabelOutOfRange {
                    label: *label as usize,
                    max: NUM_TOPOLOGIES,
                });
            }
            Ok((x, *label as usize - 1))
        })
        .collect()
}

/// Train the trainable part of `model` on preprocessed images with 1-based
/// topology labels. Keeps the best-validation weights.
pub fn train_tnet(
    model: TNet,
    train: &[(Array3<f32>, u8)],
    val: &[(Array3<f32>, u8)],
    hyper: &TrainHyper,
) -> Result<TNetTraining> {
    let before = model.frozen_checksum();
    let tr = to_zero_based(train, &model)?;
    let va = to_zero_based(val, &model)?;
    let outcome = fit(model, &tr, &va, hyper)?;
    let mut model = outcome.model;
    let after = model.frozen_checksum();
    assert_eq!(before, after, "frozen T-Net parameters changed during training");
    model.train_meta = Some(TrainMeta {
        seed: hyper.seed,
        lr: hyper.lr,
        weight_decay: hyper.weight_decay,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        frozen_checksum: after,
    });
    Ok(TNetTraining {
        model,
        logs: outcome.logs,
    })
}

/// Topology PDF for one preprocessed image.
pub fn predict_tnet(model: &TNet, image: &Array3<f32>) -> Result<ClassPdf> {
    model.check_input(image)?;
    ClassPdf::softmax(&model.logits(image), LabelSpace::Topology7)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::evaluate;
    use rand::Rng;

    fn small_model(mode: FreezeMode) -> TNet {
        let cfg = TNetConfig {
            input_size: 32,
            freeze_mode: mode,
            dropout: 0.5,
            head_seed: 3,
        };
        build_tnet(&Backbone::vgg16(32, 7), cfg).unwrap()
    }

    fn random_image(seed: u64, size: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, size, size), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn head_shape_and_frozen_blocks() {
        let m = build_tnet(&Backbone::vgg16(16, 0), TNetConfig::default()).unwrap();
        assert_eq!(m.head_widths(), (512, 128));
        assert_eq!(m.num_outputs(), 7);
        let frozen = m.frozen_tensor_names();
        assert!(frozen.iter().all(|n| (2..=4).contains(&block_of(n).unwrap())));
        // blocks 2, 3, 4 have 2 + 3 + 3 convs, each with weight and bias
        assert_eq!(frozen.len(), 16);
        assert!(m.is_trainable("block1.conv1.w"));
        assert!(m.is_trainable("block5.conv3.b"));
        assert!(m.is_trainable("fc1.w"));
        let alt = small_model(FreezeMode::Blocks1To4);
        assert!(!alt.is_trainable("block1.conv1.w"));
        assert!(alt.is_trainable("block5.conv1.w"));
    }

    #[test]
    fn snapshot_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_tnet_from_snapshot(&dir.path().join("vgg.icnt"), TNetConfig::default()),
            Err(Error::BackboneUnavailable(_))
        ));
        let mut bb = Backbone::vgg16(32, 1);
        bb.blocks.pop();
        assert!(matches!(
            build_tnet(&bb, TNetConfig::default()),
            Err(Error::BackboneStructure(_))
        ));
        let path = dir.path().join("vgg.icnt");
        Backbone::vgg16(32, 1).save(&path).unwrap();
        assert_eq!(Backbone::load(&path).unwrap(), Backbone::vgg16(32, 1));
    }

    #[test]
    fn predictions_are_pdfs_and_deterministic() {
        let m = small_model(FreezeMode::BetweenPools);
        let x = random_image(1, 32);
        let a = predict_tnet(&m, &x).unwrap();
        assert_eq!(a, predict_tnet(&m, &x).unwrap());
        assert_eq!(a.values().len(), 7);
        assert!((a.values().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(matches!(
            predict_tnet(&m, &random_image(1, 64)),
            Err(Error::WrongInputSize { .. })
        ));
    }

    /// Loss of a fixed batch as a function of one parameter, in f64.
    fn batch_loss(m: &TNet, batch: &[(Array3<f32>, usize)]) -> f64 {
        batch
            .iter()
            .map(|(x, l)| softmax_cross_entropy(&m.logits(x), *l).0)
            .sum::<f64>()
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let m = small_model(FreezeMode::BetweenPools);
        let batch: Vec<(Array3<f32>, usize)> = (0..3).map(|i| (random_image(10 + i, 32), i as usize)).collect();
        let mut grads = m.zeros_like();
        for (x, l) in &batch {
            m.accumulate_gradient(x, *l, None, &mut grads);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (r, c) = (rng.random_range(0..7), rng.random_range(0..128));
            let eps = 1e-2f32;
            let mut up = m.clone();
            up.out.weight[[r, c]] += eps;
            let mut dn = m.clone();
            dn.out.weight[[r, c]] -= eps;
            let fd = (batch_loss(&up, &batch) - batch_loss(&dn, &batch)) / (2.0 * eps as f64);
            let an = grads.out.weight[[r, c]] as f64;
            let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4));
            assert!(rel < 1e-2, "out[{r},{c}]: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn conv_gradient_reaches_block_one() {
        // wider net so that pooling switches and ReLU kinks stay rare
        let cfg = TNetConfig {
            input_size: 32,
            head_seed: 3,
            ..TNetConfig::default()
        };
        let m = build_tnet(&Backbone::vgg16(4, 7), cfg).unwrap();
        let x = random_image(2, 32);
        let mut grads = m.zeros_like();
        m.accumulate_gradient(&x, 4, None, &mut grads);
        assert!(grads.blocks[0][0].weight.iter().any(|&g| g != 0.0));
        assert!(grads.blocks[2][0].weight.iter().all(|&g| g == 0.0));
        // directional derivative along the block-1 gradient
        let g = grads.blocks[0][0].weight.clone();
        let norm2: f64 = g.iter().map(|&v| v as f64 * v as f64).sum();
        let batch = [(x, 4usize)];
        let eps = 3e-3f32;
        let mut up = m.clone();
        up.blocks[0][0].weight.scaled_add(eps, &g);
        let mut dn = m.clone();
        dn.blocks[0][0].weight.scaled_add(-eps, &g);
        let fd = (batch_loss(&up, &batch) - batch_loss(&dn, &batch)) / (2.0 * eps as f64);
        assert!((fd - norm2).abs() < 2e-2 * norm2, "fd {fd} analytic {norm2}");
    }

    fn glyph_like(class: u8, seed: u64) -> Array3<f32> {
        // bright quadrant per class plus noise
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            let region = (y / 11) * 3 + x / 11;
            let on = region == class as usize;
            (if on { 1.5 } else { -0.5 }) + 0.1 * c as f32 + rng.random_range(-0.2..0.2)
        })
    }

    #[test]
    fn training_keeps_frozen_weights_and_learns() {
        let m = small_model(FreezeMode::BetweenPools);
        let before = m.frozen_checksum();
        let data: Vec<(Array3<f32>, u8)> = (0..28).map(|i| (glyph_like((i % 7) as u8, i as u64), (i % 7) as u8 + 1)).collect();
        let hyper = TrainHyper {
            lr: 1e-3,
            max_epochs: 25,
            patience: 25,
            batch_size: 7,
            seed: 1,
            ..TrainHyper::default()
        };
        let trained = train_tnet(m, &data, &data, &hyper).unwrap();
        assert_eq!(trained.model.frozen_checksum(), before);
        let set: Vec<(&Array3<f32>, usize)> = data.iter().map(|(x, l)| (x, *l as usize - 1)).collect();
        assert!(evaluate(&trained.model, &set).1 >= 0.95);
        assert!(trained.model.train_meta.is_some());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let m = small_model(FreezeMode::BetweenPools);
        let data: Vec<(Array3<f32>, u8)> = (0..7).map(|i| (glyph_like(i as u8, i), i as u8 + 1)).collect();
        let hyper = TrainHyper {
            lr: 0.0,
            weight_decay: 0.0,
            max_epochs: 1,
            ..TrainHyper::default()
        };
        let trained = train_tnet(m.clone(), &data, &data, &hyper).unwrap();
        assert_eq!(trained.model.tensors().len(), m.tensors().len());
        for (a, b) in trained.model.tensors().iter().zip(m.tensors()) {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
    }

    #[test]
    fn bad_labels_and_checkpoint_round_trip() {
        let m = small_model(FreezeMode::Blocks1To4);
        let bad = vec![(random_image(0, 32), 8u8)];
        assert!(matches!(
            train_tnet(m.clone(), &bad, &bad, &TrainHyper::default()),
            Err(Error::LabelOutOfRange { label: 8, .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tnet.ckpt");
        m.save(&path).unwrap();
        assert_eq!(TNet::load(&path).unwrap(), m);
    }

    #[test]
    fn preprocess_normalises_channels() {
        let img = image::Rgb32FImage::from_pixel(8, 8, image::Rgb([0.485, 0.456, 0.406]));
        let x = preprocess(&img, 4);
        assert_eq!(x.dim(), (3, 4, 4));
        assert!(x.iter().all(|v| v.abs() < 1e-5));
    }
}
