//! Object-level in-context prompting for language decoders.
//!
//! An object is cut out of a patch-feature grid with a binary mask and
//! summarized into a single vector, either by a small learnable resampler
//! or by mean pooling. Mean-pooled vectors drive exact cosine retrieval over
//! a labeled retrieval set; resampler vectors replace `[obj]` token
//! embeddings in prompts fed to a causal decoder.

pub mod analysis;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod object_encoder;
pub mod params;
pub mod prompt;
pub mod retrieval;
pub mod training;

mod codec;

pub use error::{Error, Result};
