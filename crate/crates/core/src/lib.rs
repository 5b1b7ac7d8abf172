//! Similarity-guided multimodal fusion encoder.
//!
//! Two token streams (text and image embeddings) are blended by a
//! similarity-guided interaction block, fused by bidirectional
//! cross-attention, and classified by a small MLP. Everything trains on a
//! dependency-free reverse-mode tape in `f64`.

pub mod error;
pub mod exec;
pub mod numerics;
pub mod train;

pub use error::{Error, FormatError, Result};
pub mod data;
pub mod experiment;
pub mod fusion;
pub mod interaction;
pub mod model;
pub mod params;
pub mod polymerizer;
