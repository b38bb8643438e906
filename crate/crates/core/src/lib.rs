//! Pretrainable encoder for brain connectivity from any atlas.
//!
//! A distance-biased transformer encodes connectivity matrices from any
//! atlas; a soft-pooling alignment module maps every view into a fixed set of
//! supernodes, where masked reconstruction, cross-view prototype consistency
//! and an assignment-entropy term drive unsupervised pretraining. A linear
//! head on mean-pooled embeddings is fine-tuned for classification.

pub mod alignment;
pub mod atlas;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod connectome;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod interpret;
pub mod io;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
