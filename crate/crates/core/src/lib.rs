//! Progressive class-semantic matching for semi-supervised text
//! classification.
//!
//! A pretrained (or toy) BERT-style encoder is shared by two heads: a K-way
//! softmax classifier over the pooled sentence and a matching classifier
//! that scores the sentence against per-class semantic representations
//! (CSRs) injected as pseudo-tokens. Unlabeled text is pseudo-labeled only
//! when both heads agree, and CSRs are re-mined from attention as training
//! progresses.

pub mod csr;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod fixture;
pub mod model;
pub mod ssl;
pub mod tokenizer;

pub use csr::{ClassSemanticRepresentation, CsrSet, StopWords, UpdateTrigger};
pub use encoder::{BertEncoder, EncodedBatch, EncoderConfig, LayoutSpec, Precision};
pub use error::{Error, Result};
pub use experiments::{Experiment, ExperimentConfig, Method, RunResult};
pub use model::{DualHeadOutputs, HeadConfig, ModelLayout, PcmModel, PredictionHead};
pub use ssl::{GateConfig, GateMode, KlDirection, TrainConfig, TrainData, Trainer};
pub use tokenizer::{TextTokenizer, TokenizedText, WordTokenizer};
