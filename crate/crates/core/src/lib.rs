//! Deformable detection transformer with a semantic-aligned-matching decoder,
//! trained from scratch on the CPU.
//!
//! The crate bundles everything needed to go from raw annotations to
//! evaluated detections: a small reverse-mode tensor engine, box geometry,
//! multi-scale deformable attention, the semantic aligner, the full detector
//! graph, bipartite set-prediction training, COCO-format annotation tooling
//! and a COCO-style evaluator.

pub mod aligner;
pub mod annotation;
pub mod deform;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod reference;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
