//! Frame sequences to color-coded optical flow to fixed-length embedding
//! sequences.

pub mod cache;
pub mod colorize;
pub mod embed;
pub mod flow;
pub mod sequence;

pub use cache::{CacheMeta, EmbeddingCache};
pub use colorize::{colorize_flow, colorize_flow_with_max, FlowImage};
pub use embed::{FlowEmbedder, EMBED_DIM, EMBED_INPUT_SIZE};
pub use flow::{compute_flow, load_gray, FlowEstimator, FlowField, GrayFrame, PyramidalLucasKanade};
pub use sequence::{
    build_sequence, build_sequence_from_paths, EmbeddingSequence, FlowEmbeddingPipeline,
    StepEncoder, DEFAULT_SEQ_LEN,
};

/// The default encoder: pyramidal Lucas-Kanade flow and a seeded embedder.
pub fn default_pipeline(embedder_seed: u64) -> FlowEmbeddingPipeline<PyramidalLucasKanade> {
    FlowEmbeddingPipeline {
        estimator: PyramidalLucasKanade::default(),
        embedder: FlowEmbedder::seeded(embedder_seed),
    }
}
