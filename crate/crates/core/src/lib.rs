//! Relation-propagation-gated multimodal sequence tagging.
//!
//! A transformer encoder reads `[CLS] w1..wn [SEP] v1..vm`, where the `v`
//! tokens are projected image-block features. A relation head on `[CLS]`
//! scores whether the image is relevant to the text; that score scales the
//! visual embeddings before a second, gated pass whose word outputs feed a
//! biLSTM-CRF tagger.

pub mod analytics;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gate;
pub mod model;
pub mod ner;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
