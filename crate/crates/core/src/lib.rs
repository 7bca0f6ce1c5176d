//! Four-scale vision-language pretraining on a synthetic grounded corpus.
//!
//! The objective combines global image-report contrast, sentence-to-region
//! contrast, image-report matching with hard negatives, and masked image and
//! token reconstruction. Small transformer encoders are trained with it and
//! evaluated on zero-shot classification, phrase grounding and linear probing.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod objective;
pub mod seeds;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{Error, Result, Scale};
pub use model::Model;
