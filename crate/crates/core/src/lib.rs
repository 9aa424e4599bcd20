//! Intersection classification from two views of the same crossing.
//!
//! * [`fnet`] classifies the ego-motion (straight / left / right) from a
//!   sequence of optical-flow embeddings built by [`flowfeat`].
//! * [`tnet`] classifies the road topology (7 classes) from one image taken
//!   before entering the intersection, on a VGG16-style backbone.
//! * [`inet`] fuses both outputs with a binary consistency mask.
//!
//! [`dataset`], [`trainer`] and [`evalkit`] implement ingestion, k-fold
//! training and reporting; [`synth`] generates toy datasets in the same
//! on-disk layout.

pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod flowfeat;
pub mod fnet;
pub mod inet;
pub mod labels;
pub mod nn;
pub mod synth;
pub mod tensorfile;
pub mod tnet;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{
    make_pdf, top1, worst1, Catalogue, ClassPdf, ConsistencyMatrix, D2iConfig, EgoMotion,
    LabelSpace, TopologyClass,
};
