//! Self-supervised speech encoders (wav2vec 2.0 / HuBERT style) with
//! partial/entire fine-tuning and three downstream tasks: speech emotion
//! recognition, speaker verification, and spoken language understanding.
//!
//! Everything runs at desk scale on synthetic corpora: the crate ships its
//! own f64 autodiff tape, a toy-size encoder preset, deterministic corpus
//! generation, and the evaluation metrics (WA, EER, intent accuracy,
//! slot F1) used by the experiment runner.

pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Mat, NodeId};
