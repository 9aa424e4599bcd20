//! Frozen convolutional embedder mapping a 299x299 flow image to a
//! 2048-dim globally pooled feature vector.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::colorize::FlowImage;
use crate::error::{Error, Result};
use crate::nn::{relu_inplace, Conv2d};
use crate::tensorfile::TensorFile;

pub const EMBED_INPUT_SIZE: u32 = 299;
pub const EMBED_DIM: usize = 2048;

const SNAPSHOT_KIND: &str = "flow_embedder";

/// `(in, out, kernel, stride, padding)` per conv layer.
const LAYERS: [(usize, usize, usize, usize, usize); 5] = [
    (3, 16, 3, 2, 1),
    (16, 32, 3, 2, 1),
    (32, 64, 3, 2, 1),
    (64, 128, 3, 2, 1),
    (128, EMBED_DIM, 1, 1, 0),
];

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    id: String,
    layers: Vec<(usize, usize, usize, usize, usize)>,
}

/// Stride-2 conv stack with ReLU, a 1x1 expansion to 2048 channels and
/// global average pooling. Weights are a fixed snapshot; never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEmbedder {
    id: String,
    convs: Vec<Conv2d>,
}

impl FlowEmbedder {
    /// Deterministic snapshot drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = LAYERS
            .iter()
            .map(|&(i, o, k, s, p)| Conv2d::he_init(i, o, k, s, p, &mut rng))
            .collect();
        Self {
            id: format!("pooled-conv-{EMBED_DIM}/seed{seed}/v1"),
            convs,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = SnapshotMeta {
            id: self.id.clone(),
            layers: self
                .convs
                .iter()
                .map(|c| (c.in_channels, c.out_channels, c.kernel, c.stride, c.padding))
                .collect(),
        };
        let mut file = TensorFile::new(SNAPSHOT_KIND, serde_json::to_value(meta)?);
        for (i, c) in self.convs.iter().enumerate() {
            file.push(format!("conv{i}.w"), c.weight.shape().to_vec(), c.weight.iter().copied().collect());
            file.push(format!("conv{i}.b"), vec![c.bias.len()], c.bias.to_vec());
        }
        file.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path).map_err(|e| match e {
            Error::MissingFile(p) => Error::BackboneUnavailable(p.display().to_string()),
            other => other,
        })?;
        if file.kind != SNAPSHOT_KIND {
            return Err(Error::BackboneUnavailable(format!(
                "{} is a {} file, not a flow embedder snapshot",
                path.display(),
                file.kind
            )));
        }
        let meta: SnapshotMeta = serde_json::from_value(file.meta.clone())?;
        let mut convs = Vec::new();
        for (i, &(cin, cout, k, s, p)) in meta.layers.iter().enumerate() {
            let w = file.get(&format!("conv{i}.w"))?;
            let b = file.get(&format!("conv{i}.b"))?;
            let weight = Array2::from_shape_vec((cout, cin * k * k), w.data.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
            convs.push(Conv2d {
                weight,
                bias: Array1::from_vec(b.data.clone()),
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                padding: p,
            });
        }
        Ok(Self { id: meta.id, convs })
    }

    /// Embed a flow image that has already been resized to 299x299.
    pub fn embed(&self, image: &FlowImage) -> Result<Vec<f32>> {
        let (w, h) = image.dimensions();
        if (w, h) != (EMBED_INPUT_SIZE, EMBED_INPUT_SIZE) {
            return Err(Error::WrongInputSize {
                expected: (EMBED_INPUT_SIZE as usize, EMBED_INPUT_SIZE as usize),
                actual: (w as usize, h as usize),
            });
        }
        let (w, h) = (w as usize, h as usize);
        let mut x = Array3::<f32>::zeros((3, h, w));
        for (px, py, p) in image.rgb.enumerate_pixels() {
            for c in 0..3 {
                x[[c, py as usize, px as usize]] = (p[c] - 0.5) * 2.0;
            }
        }
        for conv in &self.convs {
            x = conv.infer(&x);
            relu_inplace(x.as_slice_mut().expect("contiguous"));
        }
        let (c, fh, fw) = x.dim();
        let pooled = x
            .into_shape_with_order((c, fh * fw))
            .map_err(|e| Error::Format(e.to_string()))?
            .mean_axis(Axis(1))
            .expect("non-empty");
        Ok(pooled.to_vec())
    }

    /// Resize (aspect-distorting) and embed.
    pub fn embed_any_size(&self, image: &FlowImage) -> Result<Vec<f32>> {
        self.embed(&image.resized(EMBED_INPUT_SIZE, EMBED_INPUT_SIZE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfeat::colorize::colorize_flow;
    use crate::flowfeat::flow::FlowField;
    use ndarray::Array2;

    fn uniform_flow(u: f32, v: f32) -> FlowImage {
        colorize_flow(&FlowField {
            u: Array2::from_elem((40, 40), u),
            v: Array2::from_elem((40, 40), v),
        })
    }

    #[test]
    fn deterministic_finite_2048() {
        let emb = FlowEmbedder::seeded(5);
        let img = uniform_flow(1.0, 0.5).resized(299, 299);
        let a = emb.embed(&img).unwrap();
        let b = emb.embed(&img).unwrap();
        assert_eq!(a.len(), 2048);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_flows_are_not_parallel() {
        let emb = FlowEmbedder::seeded(5);
        let a = emb.embed_any_size(&uniform_flow(2.0, 0.0)).unwrap();
        let b = emb.embed_any_size(&uniform_flow(-2.0, 0.0)).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-6);
    }

    #[test]
    fn wrong_size_rejected() {
        let emb = FlowEmbedder::seeded(5);
        assert!(matches!(
            emb.embed(&uniform_flow(1.0, 0.0)),
            Err(Error::WrongInputSize { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.icnt");
        let emb = FlowEmbedder::seeded(11);
        emb.save(&path).unwrap();
        assert_eq!(FlowEmbedder::load(&path).unwrap(), emb);
        assert!(matches!(
            FlowEmbedder::load(&dir.path().join("nope.icnt")),
            Err(Error::BackboneUnavailable(_))
        ));
    }
}
