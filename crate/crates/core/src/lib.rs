//! Text-only image captioning in a shared image-text embedding space.
//!
//! A caption decoder is trained on synthetic image features derived from
//! text alone, then run on real image features at inference. Both sides pass
//! through the same support-set projection and optional object-tag fusion.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod hash;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod projection;
pub mod refine;
pub mod toy_encoder;

pub use error::{Error, Result};
