//! The dual-head classifier: a shared encoder, a K-way semantic head over
//! the pooled sentence, and a matching head scoring the sentence against
//! each class's CSR slot.

use std::path::Path;

use candle_core::{DType, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csr::CsrSet;
use crate::encoder::{
    sentence_representation, softmax_last, BertEncoder, EncodedBatch, EncoderConfig, LayoutSpec, Linear,
    ParamStore,
};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizedText;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Gelu,
}

/// Two-layer MLP head shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_size: usize,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_size: 128,
            activation: Activation::Tanh,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::Config("head hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// Input format fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputLayout {
    /// `[CLS] text [SEP]`
    Plain,
    /// `[CLS] text [SEP] C_1 .. C_K [SEP]`
    CsrSlots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingHead {
    None,
    /// Shared MLP over `concat(sentence, slot feature)`, one logit per slot.
    CsrSlots,
    /// Multi-label MLP over the pooled sentence alone (no CSR).
    Pooled,
}

/// Which pieces of the network are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub input: InputLayout,
    pub semantic: bool,
    pub matching: MatchingHead,
}

impl ModelLayout {
    pub const PLAIN: Self = Self {
        input: InputLayout::Plain,
        semantic: true,
        matching: MatchingHead::None,
    };
    pub const DUAL: Self = Self {
        input: InputLayout::CsrSlots,
        semantic: true,
        matching: MatchingHead::CsrSlots,
    };
    pub const SEMANTIC_ONLY: Self = Self {
        input: InputLayout::CsrSlots,
        semantic: true,
        matching: MatchingHead::None,
    };
    pub const MATCHING_ONLY: Self = Self {
        input: InputLayout::CsrSlots,
        semantic: false,
        matching: MatchingHead::CsrSlots,
    };
    pub const DCDL: Self = Self {
        input: InputLayout::Plain,
        semantic: true,
        matching: MatchingHead::Pooled,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.semantic && self.matching == MatchingHead::None {
            return Err(Error::Config("model needs at least one head".into()));
        }
        if self.matching == MatchingHead::CsrSlots && self.input != InputLayout::CsrSlots {
            return Err(Error::Config("the CSR matching head needs CSR slots in the input".into()));
        }
        Ok(())
    }

    pub fn uses_csr(&self) -> bool {
        self.input == InputLayout::CsrSlots
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
    activation: Activation,
}

impl Mlp {
    fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for (layer, fan_in, fan_out) in [("fc1", in_dim, cfg.hidden_size), ("fc2", cfg.hidden_size, out_dim)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.uniform(&format!("{name}.{layer}.weight"), &[fan_out, fan_in], bound, rng)?;
            store.uniform(&format!("{name}.{layer}.bias"), &[fan_out], bound, rng)?;
        }
        Ok(())
    }

    fn load(store: &ParamStore, name: &str, activation: Activation) -> Result<Self> {
        Ok(Self {
            fc1: Linear::load(store, &format!("{name}.fc1"))?,
            fc2: Linear::load(store, &format!("{name}.fc2"))?,
            activation,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = match self.activation {
            Activation::Tanh => h.tanh()?,
            Activation::Relu => h.relu()?,
            Activation::Gelu => h.gelu_erf()?,
        };
        self.fc2.forward(&h)
    }
}

/// Logistic function via `tanh`, stable for large magnitudes.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Head outputs; blocks of an absent head are `None`. All are `[batch, K]`.
#[derive(Debug, Clone)]
pub struct DualHeadOutputs {
    pub semantic_logits: Option<Tensor>,
    pub semantic_probs: Option<Tensor>,
    pub matching_logits: Option<Tensor>,
    pub matching_probs: Option<Tensor>,
    /// Rows whose text span was empty after truncation.
    pub empty_text: Vec<bool>,
}

impl DualHeadOutputs {
    pub fn from_logits(semantic: Option<Tensor>, matching: Option<Tensor>, rows: usize) -> Result<Self> {
        let semantic_probs = semantic.as_ref().map(softmax_last).transpose()?;
        let matching_probs = matching.as_ref().map(sigmoid).transpose()?;
        Ok(Self {
            semantic_logits: semantic,
            semantic_probs,
            matching_logits: matching,
            matching_probs,
            empty_text: vec![false; rows],
        })
    }

    pub fn rows(&self) -> usize {
        self.empty_text.len()
    }

    pub fn detach(&self) -> Self {
        let d = |t: &Option<Tensor>| t.as_ref().map(Tensor::detach);
        Self {
            semantic_logits: d(&self.semantic_logits),
            semantic_probs: d(&self.semantic_probs),
            matching_logits: d(&self.matching_logits),
            matching_probs: d(&self.matching_probs),
            empty_text: self.empty_text.clone(),
        }
    }

    /// Detached host copy.
    pub fn values(&self) -> Result<HeadValues> {
        let v = |t: &Option<Tensor>| -> Result<Option<Vec<Vec<f64>>>> {
            t.as_ref()
                .map(|t| Ok(t.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?))
                .transpose()
        };
        Ok(HeadValues {
            semantic_logits: v(&self.semantic_logits)?,
            semantic_probs: v(&self.semantic_probs)?,
            matching_probs: v(&self.matching_probs)?,
        })
    }
}

/// Host-side head outputs, one `Vec` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub semantic_logits: Option<Vec<Vec<f64>>>,
    pub semantic_probs: Option<Vec<Vec<f64>>>,
    pub matching_probs: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PredictionHead {
    #[default]
    Semantic,
    Matching,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    encoder: EncoderConfig,
    layout: ModelLayout,
    head: HeadConfig,
    num_classes: usize,
    csr_version: Option<u64>,
}

#[derive(Debug)]
pub struct PcmModel {
    encoder: BertEncoder,
    layout: ModelLayout,
    head_cfg: HeadConfig,
    num_classes: usize,
    heads: ParamStore,
    semantic: Option<Mlp>,
    matching: Option<Mlp>,
}

impl PcmModel {
    /// Wraps `encoder` with freshly initialized heads.
    pub fn new(
        encoder: BertEncoder,
        num_classes: usize,
        layout: ModelLayout,
        head_cfg: HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        layout.validate()?;
        head_cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let h = encoder.config().hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut heads = ParamStore::new(encoder.dtype());
        if layout.semantic {
            Mlp::init(&mut heads, "semantic", h, num_classes, &head_cfg, &mut rng)?;
        }
        match layout.matching {
            MatchingHead::None => {}
            MatchingHead::CsrSlots => Mlp::init(&mut heads, "matching", 2 * h, 1, &head_cfg, &mut rng)?,
            MatchingHead::Pooled => Mlp::init(&mut heads, "matching", h, num_classes, &head_cfg, &mut rng)?,
        }
        Self::assemble(encoder, layout, head_cfg, num_classes, heads)
    }

    fn assemble(
        encoder: BertEncoder,
        layout: ModelLayout,
        head_cfg: HeadConfig,
        num_classes: usize,
        heads: ParamStore,
    ) -> Result<Self> {
        let semantic = layout
            .semantic
            .then(|| Mlp::load(&heads, "semantic", head_cfg.activation))
            .transpose()?;
        let matching = (layout.matching != MatchingHead::None)
            .then(|| Mlp::load(&heads, "matching", head_cfg.activation))
            .transpose()?;
        Ok(Self {
            encoder,
            layout,
            head_cfg,
            num_classes,
            heads,
            semantic,
            matching,
        })
    }

    pub fn encoder(&self) -> &BertEncoder {
        &self.encoder
    }

    pub fn layout(&self) -> ModelLayout {
        self.layout
    }

    pub fn head_config(&self) -> HeadConfig {
        self.head_cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn heads(&self) -> &ParamStore {
        &self.heads
    }

    pub fn encoder_vars(&self) -> Vec<Var> {
        self.encoder.store().all_vars()
    }

    pub fn head_vars(&self) -> Vec<Var> {
        self.heads.all_vars()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::assemble(
            self.encoder.deep_clone()?,
            self.layout,
            self.head_cfg,
            self.num_classes,
            self.heads.deep_clone()?,
        )
    }

    /// Lays `texts` out in this model's input format.
    pub fn encode(&self, texts: &[&TokenizedText], csr: Option<&CsrSet>, spec: &LayoutSpec) -> Result<EncodedBatch> {
        match self.layout.input {
            InputLayout::Plain => Ok(EncodedBatch::plain(texts, spec)),
            InputLayout::CsrSlots => {
                let csr = csr.ok_or_else(|| Error::Config("this model needs an active CSR".into()))?;
                Ok(csr.encode(texts, spec))
            }
        }
    }

    /// Runs encoder and heads. A batch laid out for a different CSR version
    /// than `csr` is rejected.
    pub fn forward(
        &self,
        batch: &EncodedBatch,
        csr: Option<&CsrSet>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DualHeadOutputs> {
        let slots = match self.layout.input {
            InputLayout::Plain => {
                if batch.num_slots() > 0 {
                    return Err(Error::Config("plain model received a batch with CSR slots".into()));
                }
                None
            }
            InputLayout::CsrSlots => {
                let csr = csr.ok_or_else(|| Error::Config("this model needs an active CSR".into()))?;
                if batch.csr_version != Some(csr.version) {
                    return Err(Error::StaleBatch {
                        batch: batch.csr_version,
                        active: csr.version,
                    });
                }
                if csr.num_classes() != self.num_classes {
                    return Err(Error::Config(format!(
                        "{} CSRs for a {}-class model",
                        csr.num_classes(),
                        self.num_classes
                    )));
                }
                Some(csr.embeddings(self.encoder.dtype(), self.encoder.device())?)
            }
        };
        let out = self.encoder.forward(batch, slots.as_ref(), dropout_rng)?;
        let (sentence, empty) = sentence_representation(&out, batch)?;
        let semantic = self.semantic.as_ref().map(|m| m.forward(&sentence)).transpose()?;
        let matching = match (&self.matching, self.layout.matching) {
            (Some(m), MatchingHead::CsrSlots) => {
                let selector = batch.slot_selector(out.features.dtype(), out.features.device())?;
                let slot_features = selector.matmul(&out.features)?; // [b, K, H]
                let k = batch.num_slots();
                let (b, h) = sentence.dims2()?;
                let expanded = sentence.unsqueeze(1)?.broadcast_as((b, k, h))?;
                let joint = Tensor::cat(&[&expanded, &slot_features], D::Minus1)?;
                Some(m.forward(&joint)?.squeeze(D::Minus1)?)
            }
            (Some(m), MatchingHead::Pooled) => Some(m.forward(&sentence)?),
            _ => None,
        };
        let mut outputs = DualHeadOutputs::from_logits(semantic, matching, batch.rows)?;
        outputs.empty_text = empty;
        Ok(outputs)
    }

    /// Evaluation-mode class predictions. `head` falls back to whichever
    /// head exists when the requested one is absent.
    pub fn predict(&self, batch: &EncodedBatch, csr: Option<&CsrSet>, head: PredictionHead) -> Result<Vec<usize>> {
        let values = self.forward(batch, csr, None)?.values()?;
        predict_from(&values, head)
    }

    /// Writes `encoder.safetensors`, `heads.safetensors` and `model.json`.
    pub fn save(&self, dir: &Path, csr_version: Option<u64>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.store().save(&dir.join("encoder.safetensors"))?;
        self.heads.save(&dir.join("heads.safetensors"))?;
        let meta = ModelMeta {
            encoder: self.encoder.config().clone(),
            layout: self.layout,
            head: self.head_cfg,
            num_classes: self.num_classes,
            csr_version,
        };
        let path = dir.join("model.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Inverse of [`PcmModel::save`]; also returns the bound CSR version.
    pub fn load(dir: &Path) -> Result<(Self, Option<u64>)> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        let fresh = Self::new(
            BertEncoder::init(meta.encoder.clone(), 0)?,
            meta.num_classes,
            meta.layout,
            meta.head,
            0,
        )?;
        for (store, file) in [
            (fresh.encoder.store(), "encoder.safetensors"),
            (&fresh.heads, "heads.safetensors"),
        ] {
            let missing = store.load_from(&dir.join(file), |n| Some(n.to_string()))?;
            if !missing.is_empty() {
                return Err(Error::Config(format!("{file} lacks {}", missing.join(", "))));
            }
        }
        Ok((fresh, meta.csr_version))
    }
}

pub fn predict_from(values: &HeadValues, head: PredictionHead) -> Result<Vec<usize>> {
    let probs = match head {
        PredictionHead::Semantic => values.semantic_probs.as_ref().or(values.matching_probs.as_ref()),
        PredictionHead::Matching => values.matching_probs.as_ref().or(values.semantic_probs.as_ref()),
    }
    .ok_or_else(|| Error::Config("no head outputs".into()))?;
    Ok(probs.iter().map(|r| argmax(r)).collect())
}
