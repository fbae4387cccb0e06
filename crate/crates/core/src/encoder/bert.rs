//! BERT-architecture transformer encoder.
//!
//! Parameter names follow the Hugging Face BERT layout so pretrained
//! safetensors checkpoints load without conversion.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::EncodedBatch;
use super::params::ParamStore;
use super::{EncoderConfig, EncoderHandle, EncoderOutput};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub(crate) fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        store.normal(&format!("{name}.weight"), &[out_dim, in_dim], INIT_STD, rng)?;
        store.constant(&format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(())
    }

    pub(crate) fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"))?,
            bias: store.get(&format!("{name}.bias"))?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
        store.constant(&format!("{name}.weight"), &[dim], 1.0)?;
        store.constant(&format!("{name}.bias"), &[dim], 0.0)?;
        Ok(())
    }

    fn load(store: &ParamStore, name: &str, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"))?,
            bias: store.get(&format!("{name}.bias"))?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Row softmax along the last axis. The max shift is detached; it cancels
/// analytically.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn dropout(x: Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let scale = 1.0 / (1.0 - p);
    let keep: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(keep, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
}

impl Layer {
    fn prefix(i: usize) -> String {
        format!("encoder.layer.{i}")
    }

    fn init(store: &mut ParamStore, i: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        let p = Self::prefix(i);
        let h = cfg.hidden_size;
        for name in ["query", "key", "value"] {
            Linear::init(store, &format!("{p}.attention.self.{name}"), h, h, rng)?;
        }
        Linear::init(store, &format!("{p}.attention.output.dense"), h, h, rng)?;
        LayerNorm::init(store, &format!("{p}.attention.output.LayerNorm"), h)?;
        Linear::init(store, &format!("{p}.intermediate.dense"), h, cfg.intermediate_size, rng)?;
        Linear::init(store, &format!("{p}.output.dense"), cfg.intermediate_size, h, rng)?;
        LayerNorm::init(store, &format!("{p}.output.LayerNorm"), h)?;
        Ok(())
    }

    fn load(store: &ParamStore, i: usize, cfg: &EncoderConfig) -> Result<Self> {
        let p = Self::prefix(i);
        let eps = cfg.layer_norm_eps;
        Ok(Self {
            query: Linear::load(store, &format!("{p}.attention.self.query"))?,
            key: Linear::load(store, &format!("{p}.attention.self.key"))?,
            value: Linear::load(store, &format!("{p}.attention.self.value"))?,
            attn_out: Linear::load(store, &format!("{p}.attention.output.dense"))?,
            attn_norm: LayerNorm::load(store, &format!("{p}.attention.output.LayerNorm"), eps)?,
            intermediate: Linear::load(store, &format!("{p}.intermediate.dense"))?,
            output: Linear::load(store, &format!("{p}.output.dense"))?,
            out_norm: LayerNorm::load(store, &format!("{p}.output.LayerNorm"), eps)?,
        })
    }

    /// Returns the layer output and its attention probabilities
    /// `[batch, heads, seq, seq]`.
    fn forward(
        &self,
        x: &Tensor,
        mask_bias: &Tensor,
        cfg: &EncoderConfig,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, s, h) = x.dims3()?;
        let heads = cfg.num_heads;
        let dh = h / heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, s, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(mask_bias)?;
        let probs = softmax_last(&scores)?;
        let ctx = dropout(probs.clone(), cfg.dropout, rng.as_deref_mut())?
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, s, h))?;
        let attn = dropout(self.attn_out.forward(&ctx)?, cfg.dropout, rng.as_deref_mut())?;
        let x = self.attn_norm.forward(&(attn + x)?)?;
        let inner = self.intermediate.forward(&x)?.gelu_erf()?;
        let out = dropout(self.output.forward(&inner)?, cfg.dropout, rng.as_deref_mut())?;
        let y = self.out_norm.forward(&(out + x)?)?;
        Ok((y, probs))
    }
}

#[derive(Debug)]
pub struct BertEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    word: Tensor,
    position: Tensor,
    token_type: Tensor,
    emb_norm: LayerNorm,
    layers: Vec<Layer>,
}

impl BertEncoder {
    /// Random initialization (normal, std 0.02 except word embeddings, which
    /// use `cfg.word_init_std`; unit LayerNorm), reproducible from `seed`.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(cfg.precision.dtype());
        let h = cfg.hidden_size;
        store.normal(
            "embeddings.word_embeddings.weight",
            &[cfg.vocab_size, h],
            cfg.word_init_std,
            &mut rng,
        )?;
        store.normal(
            "embeddings.position_embeddings.weight",
            &[cfg.max_positions, h],
            INIT_STD,
            &mut rng,
        )?;
        store.normal(
            "embeddings.token_type_embeddings.weight",
            &[cfg.type_vocab_size, h],
            INIT_STD,
            &mut rng,
        )?;
        LayerNorm::init(&mut store, "embeddings.LayerNorm", h)?;
        for i in 0..cfg.num_layers {
            Layer::init(&mut store, i, &cfg, &mut rng)?;
        }
        Self::from_store(cfg, store)
    }

    pub fn from_store(cfg: EncoderConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| Layer::load(&store, i, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            word: store.get("embeddings.word_embeddings.weight")?,
            position: store.get("embeddings.position_embeddings.weight")?,
            token_type: store.get("embeddings.token_type_embeddings.weight")?,
            emb_norm: LayerNorm::load(&store, "embeddings.LayerNorm", cfg.layer_norm_eps)?,
            layers,
            cfg,
            store,
        })
    }

    /// Loads a Hugging Face BERT checkpoint directory (`config.json` plus
    /// `model.safetensors`). Pooler and pretraining heads are ignored.
    pub fn from_checkpoint_dir(dir: &Path, precision: super::Precision) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut cfg = EncoderConfig::from_hf_json(&text)?;
        cfg.precision = precision;
        let enc = Self::init(cfg, 0)?;
        let weights = dir.join("model.safetensors");
        let missing = enc.store.load_from(&weights, |name| {
            let name = name.strip_prefix("bert.").unwrap_or(name);
            if !name.starts_with("embeddings.") && !name.starts_with("encoder.") {
                return None;
            }
            let name = name.replace(".gamma", ".weight").replace(".beta", ".bias");
            Some(name)
        })?;
        let missing: Vec<_> = missing
            .into_iter()
            .filter(|n| n != "embeddings.position_ids")
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "{}: checkpoint lacks {} encoder tensors (first: {})",
                weights.display(),
                missing.len(),
                missing[0]
            )));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn handle(&self) -> EncoderHandle {
        EncoderHandle::from(&self.cfg)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_store(self.cfg.clone(), self.store.deep_clone()?)
    }

    /// Input word-embedding rows for `ids`, detached, as `f64` vectors.
    pub fn word_embedding_rows(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let idx = Tensor::new(ids, self.device())?;
        Ok(self
            .word
            .detach()
            .index_select(&idx, 0)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?)
    }

    /// Runs the encoder. `slot_embeddings` (`[K, hidden]`) replaces the word
    /// embedding at each row's CSR slots; positional and segment embeddings
    /// are still added. Passing a dropout generator enables training mode.
    pub fn forward(
        &self,
        batch: &EncodedBatch,
        slot_embeddings: Option<&Tensor>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let (b, s) = (batch.rows, batch.seq_len);
        if s > self.cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.cfg.max_positions,
            });
        }
        let dev = self.device();
        let dtype = self.dtype();
        let ids = Tensor::from_slice(&batch.token_ids, b * s, dev)?;
        let mut words = self.word.index_select(&ids, 0)?.reshape((b, s, self.cfg.hidden_size))?;
        let k = batch.num_slots();
        if k > 0 {
            let slots = slot_embeddings.ok_or_else(|| {
                Error::Config("batch has CSR slots but no CSR embeddings were supplied".into())
            })?;
            let (sk, sh) = slots.dims2()?;
            if sk != k || sh != self.cfg.hidden_size {
                return Err(Error::Config(format!(
                    "CSR embeddings are [{sk}, {sh}] but the batch needs [{k}, {}]",
                    self.cfg.hidden_size
                )));
            }
            let selector = batch.slot_selector(dtype, dev)?; // [b, K, s]
            let at_slot = selector.sum(1)?.unsqueeze(2)?; // [b, s, 1]
            let injected = selector.transpose(1, 2)?.broadcast_matmul(&slots.to_dtype(dtype)?)?;
            words = (words.broadcast_mul(&at_slot.affine(-1.0, 1.0)?)? + injected)?;
        }
        let pos_ids = Tensor::from_slice(&batch.position_ids, b * s, dev)?;
        let pos = self
            .position
            .index_select(&pos_ids, 0)?
            .reshape((b, s, self.cfg.hidden_size))?;
        let seg_ids = Tensor::from_slice(&batch.segment_ids, b * s, dev)?;
        let seg = self
            .token_type
            .index_select(&seg_ids, 0)?
            .reshape((b, s, self.cfg.hidden_size))?;
        let emb = words.add(&pos)?.add(&seg)?;
        let mut x = dropout(self.emb_norm.forward(&emb)?, self.cfg.dropout, dropout_rng.as_deref_mut())?;

        let bias: Vec<f64> = batch
            .attention_mask
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { -1e9 })
            .collect();
        let mask_bias = Tensor::from_vec(bias, (b, 1, 1, s), dev)?.to_dtype(dtype)?;
        let mut attention = None;
        for layer in &self.layers {
            let (y, probs) = layer.forward(&x, &mask_bias, &self.cfg, dropout_rng.as_deref_mut())?;
            x = y;
            attention = Some(probs);
        }
        let attention = attention.ok_or_else(|| Error::Config("encoder has no layers".into()))?;
        Ok(EncoderOutput {
            features: x,
            attention,
        })
    }
}
