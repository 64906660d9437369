//! Two-query foreground segmentation: an edge-enhanced ViT backbone, a
//! masked-attention decoder, contrastive refinement and evaluation.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod criterion;
pub mod decoder;
pub mod edge;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refiner;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
