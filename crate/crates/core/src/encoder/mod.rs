//! Pretrained-encoder abstraction: input layout with CSR slots, forward pass
//! exposing last-layer features and attention, and masked mean pooling.

mod batch;
mod bert;
mod params;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use batch::{EncodedBatch, LayoutSpec};
pub use bert::BertEncoder;
pub(crate) use bert::{softmax_last, Linear};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::tokenizer::{HfTokenizer, TextTokenizer, WordTokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
    pub dropout: f64,
    #[serde(default)]
    pub precision: Precision,
    /// Std of the random word-embedding init; position and segment
    /// embeddings use 0.02.
    #[serde(default = "default_word_init_std")]
    pub word_init_std: f64,
}

fn default_word_init_std() -> f64 {
    0.02
}

/// Word-embedding init scale of the toy encoder. Larger than the position
/// scale so that averaged word vectors stay distinguishable after the
/// embedding LayerNorm.
pub const TOY_WORD_INIT_STD: f64 = 0.2;

impl EncoderConfig {
    /// The desk-scale configuration: 2 layers, hidden 128, 4 heads, no dropout.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 128,
            num_layers: 2,
            num_heads: 4,
            intermediate_size: 512,
            max_positions: 256,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            dropout: 0.0,
            precision: Precision::F32,
            word_init_std: TOY_WORD_INIT_STD,
        }
    }

    pub fn from_hf_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hf {
            vocab_size: usize,
            hidden_size: usize,
            num_hidden_layers: usize,
            num_attention_heads: usize,
            intermediate_size: usize,
            max_position_embeddings: usize,
            #[serde(default = "two")]
            type_vocab_size: usize,
            #[serde(default = "eps")]
            layer_norm_eps: f64,
            #[serde(default)]
            hidden_dropout_prob: f64,
        }
        fn two() -> usize {
            2
        }
        fn eps() -> f64 {
            1e-12
        }
        let hf: Hf = serde_json::from_str(text)?;
        let cfg = Self {
            vocab_size: hf.vocab_size,
            hidden_size: hf.hidden_size,
            num_layers: hf.num_hidden_layers,
            num_heads: hf.num_attention_heads,
            intermediate_size: hf.intermediate_size,
            max_positions: hf.max_position_embeddings,
            type_vocab_size: hf.type_vocab_size,
            layer_norm_eps: hf.layer_norm_eps,
            dropout: hf.hidden_dropout_prob,
            precision: Precision::F32,
            word_init_std: default_word_init_std(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be positive and divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.type_vocab_size < 2 {
            return Err(Error::Config(
                "encoder needs at least one layer, a vocabulary and two segment types".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Shape metadata of a loaded encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderHandle {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
}

impl From<&EncoderConfig> for EncoderHandle {
    fn from(c: &EncoderConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            hidden_dim: c.hidden_size,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            max_positions: c.max_positions,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[batch, seq, hidden]`
    pub features: Tensor,
    /// Last layer, `[batch, heads, seq, seq]`, rows indexed by query.
    pub attention: Tensor,
}

/// Mean of last-layer features over each row's text span. Rows with an
/// empty span get a zero vector and are reported in the returned flags.
pub fn sentence_representation(
    output: &EncoderOutput,
    batch: &EncodedBatch,
) -> Result<(Tensor, Vec<bool>)> {
    let features = &output.features;
    let weights = batch
        .text_pooling_weights(features.dtype(), features.device())?
        .unsqueeze(1)?;
    let pooled = weights.matmul(features)?.squeeze(1)?;
    let flags = batch.text_spans.iter().map(|s| s.is_empty()).collect();
    Ok((pooled, flags))
}

/// Where encoder weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EncoderSource {
    /// Randomly initialized [`EncoderConfig::toy`] encoder with a word-level
    /// vocabulary built from the experiment's texts.
    Toy {
        seed: u64,
        #[serde(default = "toy_word_init_std")]
        word_init_std: f64,
    },
    /// Hugging Face checkpoint directory `<cache_dir>/<id>`.
    Checkpoint { id: String },
}

fn toy_word_init_std() -> f64 {
    TOY_WORD_INIT_STD
}

pub const CACHE_DIR_ENV: &str = "PCM_CACHE_DIR";

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".pcm-cache"))
}

/// A tokenizer paired with the encoder that consumes its ids.
#[derive(Clone)]
pub struct Backbone {
    pub tokenizer: Arc<dyn TextTokenizer>,
    pub encoder: Arc<BertEncoder>,
}

impl Backbone {
    /// Resolves `source`. `vocab_texts` seeds the word vocabulary of toy
    /// encoders and is ignored for checkpoints.
    pub fn load<'a>(
        source: &EncoderSource,
        precision: Precision,
        vocab_texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        match source {
            EncoderSource::Toy { seed, word_init_std } => {
                let tokenizer = WordTokenizer::from_texts(vocab_texts, 1);
                let mut cfg = EncoderConfig::toy(tokenizer.vocab_size());
                cfg.precision = precision;
                cfg.word_init_std = *word_init_std;
                let encoder = BertEncoder::init(cfg, *seed)?;
                Ok(Self {
                    tokenizer: Arc::new(tokenizer),
                    encoder: Arc::new(encoder),
                })
            }
            EncoderSource::Checkpoint { id } => Self::from_dir(&cache_dir().join(id), precision),
        }
    }

    pub fn from_dir(dir: &Path, precision: Precision) -> Result<Self> {
        let tokenizer = HfTokenizer::from_dir(dir)?;
        let encoder = BertEncoder::from_checkpoint_dir(dir, precision)?;
        Ok(Self {
            tokenizer: Arc::new(tokenizer),
            encoder: Arc::new(encoder),
        })
    }
}
