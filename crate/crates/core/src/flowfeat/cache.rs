//! On-disk embedding cache: one `<key>.icnt` tensor file per sequence plus a
//! `<key>.json` sidecar with the same metadata in readable form.
//!
//! The tensor file holds a single `vectors` tensor (`seq_len x dim`); its
//! header `meta` and the sidecar both carry [`CacheMeta`].

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::sequence::{build_sequence_from_paths, EmbeddingSequence, StepEncoder};
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;

pub const CACHE_FORMAT_VERSION: u32 = 1;
const CACHE_KIND: &str = "embedding_sequence";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub format_version: u32,
    pub seq_len: usize,
    pub dim: usize,
    /// Identifier of the flow estimator + embedder snapshot.
    pub backbone_id: String,
    pub source_frames: Vec<String>,
    pub valid_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

/// Keep `[A-Za-z0-9_.-]`, replace everything else.
pub fn cache_key(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_.-".contains(c) { c } else { '_' })
        .collect()
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        let key = cache_key(key);
        (
            self.dir.join(format!("{key}.icnt")),
            self.dir.join(format!("{key}.json")),
        )
    }

    pub fn store(&self, key: &str, seq: &EmbeddingSequence, backbone_id: &str, frames: &[PathBuf]) -> Result<()> {
        let meta = CacheMeta {
            format_version: CACHE_FORMAT_VERSION,
            seq_len: seq.seq_len(),
            dim: seq.dim(),
            backbone_id: backbone_id.to_string(),
            source_frames: frames.iter().map(|p| p.display().to_string()).collect(),
            valid_mask: seq.valid_mask().to_vec(),
        };
        let (bin, sidecar) = self.paths(key);
        let mut file = TensorFile::new(CACHE_KIND, serde_json::to_value(&meta)?);
        file.push(
            "vectors",
            vec![seq.seq_len(), seq.dim()],
            seq.vectors().iter().copied().collect(),
        );
        file.write(&bin)?;
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(&self, key: &str) -> Result<Option<(EmbeddingSequence, CacheMeta)>> {
        let (bin, _) = self.paths(key);
        if !bin.exists() {
            return Ok(None);
        }
        let file = TensorFile::read(&bin)?;
        if file.kind != CACHE_KIND {
            return Err(Error::Format(format!("{} is not an embedding cache file", bin.display())));
        }
        let meta: CacheMeta = serde_json::from_value(file.meta.clone())?;
        if meta.format_version != CACHE_FORMAT_VERSION {
            return Ok(None);
        }
        let t = file.get("vectors")?;
        let vectors = Array2::from_shape_vec((meta.seq_len, meta.dim), t.data.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let seq = EmbeddingSequence::new(vectors, meta.valid_mask.clone())?;
        Ok(Some((seq, meta)))
    }

    /// Return the cached sequence when it was built from the same frames
    /// with the same encoder and length; otherwise build and store it.
    pub fn get_or_compute(
        &self,
        key: &str,
        frames: &[PathBuf],
        encoder: &dyn StepEncoder,
        seq_len: usize,
        allow_compute: bool,
    ) -> Result<EmbeddingSequence> {
        let wanted: Vec<String> = frames.iter().map(|p| p.display().to_string()).collect();
        let encoder_id = encoder.id();
        if let Some((seq, meta)) = self.load(key)? {
            if meta.source_frames == wanted && meta.backbone_id == encoder_id && meta.seq_len == seq_len {
                return Ok(seq);
            }
        }
        if !allow_compute {
            return Err(Error::MissingCache(self.paths(key).0));
        }
        let seq = build_sequence_from_paths(frames, encoder, seq_len)?;
        self.store(key, &seq, &encoder_id, frames)?;
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfeat::flow::GrayFrame;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);

    impl StepEncoder for Counting {
        fn id(&self) -> String {
            "counting".into()
        }
        fn dim(&self) -> usize {
            3
        }
        fn encode(&self, a: &GrayFrame, _: &GrayFrame) -> Result<Vec<f32>> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(vec![1.0, a[[0, 0]] + 1.0, 3.0])
        }
    }

    fn write_frames(dir: &Path, n: usize) -> Vec<PathBuf> {
        (0..n)
            .map(|i| {
                let p = dir.join(format!("{i:010}.png"));
                image::GrayImage::from_pixel(4, 4, image::Luma([i as u8 * 10])).save(&p).unwrap();
                p
            })
            .collect()
    }

    #[test]
    fn second_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let frames = write_frames(dir.path(), 5);
        let cache = EmbeddingCache::new(dir.path().join("cache"));
        std::fs::create_dir_all(cache.dir()).unwrap();
        let enc = Counting(AtomicUsize::new(0));
        let a = cache.get_or_compute("int/01", &frames, &enc, 80, true).unwrap();
        assert_eq!(enc.0.load(Ordering::SeqCst), 4);
        let b = cache.get_or_compute("int/01", &frames, &enc, 80, true).unwrap();
        assert_eq!(enc.0.load(Ordering::SeqCst), 4);
        assert_eq!(a, b);
        let (bin, sidecar) = cache.paths("int/01");
        assert!(bin.ends_with("int_01.icnt"));
        let meta: CacheMeta = serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(meta.seq_len, 80);
        assert_eq!(meta.valid_mask.iter().filter(|&&v| v).count(), 4);
        // different frame list -> recompute
        cache.get_or_compute("int/01", &frames[..3], &enc, 80, true).unwrap();
        assert_eq!(enc.0.load(Ordering::SeqCst), 6);
    }

    #[test]
    fn missing_entry_without_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let frames = write_frames(dir.path(), 3);
        let cache = EmbeddingCache::new(dir.path());
        let enc = Counting(AtomicUsize::new(0));
        assert!(matches!(
            cache.get_or_compute("x", &frames, &enc, 80, false),
            Err(Error::MissingCache(_))
        ));
    }
}
