use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FallbackAugment;
use crate::encoder::{EncoderSource, Precision, TOY_WORD_INIT_STD};
use crate::error::{Error, Result};
use crate::fixture::{FixtureConfig, FIXTURE_CORPUS};
use crate::model::{HeadConfig, ModelLayout, PredictionHead};
use crate::ssl::{GateMode, TrainConfig};

/// Training recipes compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Supervised fine-tuning on the labeled set only.
    BertFt,
    /// Single K-way head with semantic-confidence gating and KL consistency.
    Uda,
    /// Dual heads, CSR slots, agreement gate, progressive CSR updates.
    Pcm,
    PcmNoCsrUpdate,
    PcmSemanticOnly,
    PcmMatchingOnly,
    /// UDA input with a second BCE head and the agreement gate, no CSR.
    UdaDcdl,
}

/// How a [`Method`] configures model and trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub layout: ModelLayout,
    pub use_unlabeled: bool,
    pub gate_mode: GateMode,
    pub csr_updates: bool,
    pub prediction_head: PredictionHead,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::BertFt,
        Method::Uda,
        Method::Pcm,
        Method::PcmNoCsrUpdate,
        Method::PcmSemanticOnly,
        Method::PcmMatchingOnly,
        Method::UdaDcdl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BertFt => "bert-ft",
            Method::Uda => "uda",
            Method::Pcm => "pcm",
            Method::PcmNoCsrUpdate => "pcm-no-csr-update",
            Method::PcmSemanticOnly => "pcm-semantic-only",
            Method::PcmMatchingOnly => "pcm-matching-only",
            Method::UdaDcdl => "uda-dcdl",
        }
    }

    pub fn spec(self) -> MethodSpec {
        let base = MethodSpec {
            layout: ModelLayout::DUAL,
            use_unlabeled: true,
            gate_mode: GateMode::Agreement,
            csr_updates: true,
            prediction_head: PredictionHead::Semantic,
        };
        match self {
            Method::BertFt => MethodSpec {
                layout: ModelLayout::PLAIN,
                use_unlabeled: false,
                gate_mode: GateMode::SemanticConfidence,
                csr_updates: false,
                ..base
            },
            Method::Uda => MethodSpec {
                layout: ModelLayout::PLAIN,
                gate_mode: GateMode::SemanticConfidence,
                csr_updates: false,
                ..base
            },
            Method::Pcm => base,
            Method::PcmNoCsrUpdate => MethodSpec {
                csr_updates: false,
                ..base
            },
            Method::PcmSemanticOnly => MethodSpec {
                layout: ModelLayout::SEMANTIC_ONLY,
                gate_mode: GateMode::SemanticConfidence,
                ..base
            },
            Method::PcmMatchingOnly => MethodSpec {
                layout: ModelLayout::MATCHING_ONLY,
                gate_mode: GateMode::MatchingConfidence,
                prediction_head: PredictionHead::Matching,
                ..base
            },
            Method::UdaDcdl => MethodSpec {
                layout: ModelLayout::DCDL,
                csr_updates: false,
                ..base
            },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Where the texts come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    /// The synthetic keyword corpus, generated in memory.
    Fixture(FixtureConfig),
    /// Delimited files with a header (`text` and `label` columns).
    Files {
        train: PathBuf,
        test: PathBuf,
        /// Augmented views aligned row-by-row with `train`; the word-level
        /// fallback is used when absent.
        augmentations: Option<PathBuf>,
        delimiter: char,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: String,
    pub data: DataSource,
    pub n_per_class: usize,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub encoder: EncoderSource,
    pub precision: Precision,
    pub head: HeadConfig,
    /// Learning rates, batches, gate thresholds, CSR mining (`top_j`) and
    /// schedule. Method-specific fields are overwritten per run.
    pub train: TrainConfig,
    pub max_len: usize,
    pub unlabeled_cap: Option<usize>,
    pub validation_fraction: f64,
    /// Epochs of the supervised fine-tune that seeds the initial CSRs.
    pub init_epochs: usize,
    pub augment: FallbackAugment,
    /// Evaluate on at most this many test rows.
    pub test_cap: Option<usize>,
    /// Hand-picked CSR words per class instead of mined ones (exploration
    /// only).
    pub seed_words: Option<Vec<Vec<String>>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: "yahoo_answers".into(),
            data: DataSource::Files {
                train: PathBuf::from("data/yahoo_answers/train.csv"),
                test: PathBuf::from("data/yahoo_answers/test.csv"),
                augmentations: None,
                delimiter: ',',
            },
            n_per_class: 10,
            seeds: vec![0, 1, 2],
            method: Method::Pcm,
            encoder: EncoderSource::Checkpoint {
                id: "bert-base-uncased".into(),
            },
            precision: Precision::F32,
            head: HeadConfig::default(),
            train: TrainConfig {
                check_every: 1000,
                ..TrainConfig::default()
            },
            max_len: 256,
            unlabeled_cap: Some(50_000),
            validation_fraction: 0.1,
            init_epochs: 20,
            augment: FallbackAugment::default(),
            test_cap: None,
            seed_words: None,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale setup: synthetic corpus, 3 labels per class, 200 unlabeled
    /// sentences, randomly initialized toy encoder. Learning rates are far
    /// above the pretrained-encoder defaults because the toy encoder starts
    /// from random weights.
    pub fn fixture(method: Method) -> Self {
        Self {
            corpus: FIXTURE_CORPUS.into(),
            data: DataSource::Fixture(FixtureConfig::default()),
            n_per_class: 3,
            seeds: vec![0, 1, 2],
            method,
            encoder: EncoderSource::Toy {
                seed: 11,
                word_init_std: TOY_WORD_INIT_STD,
            },
            precision: Precision::F32,
            head: HeadConfig::default(),
            train: TrainConfig {
                encoder_lr: 2e-4,
                head_lr: 1e-3,
                labeled_batch: 12,
                epochs: 20,
                check_every: 50,
                patience: None,
                eval_batch: 64,
                ..TrainConfig::default()
            },
            max_len: 64,
            unlabeled_cap: Some(200),
            validation_fraction: 0.1,
            init_epochs: 20,
            augment: FallbackAugment::default(),
            test_cap: None,
            seed_words: None,
        }
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.max_len < 8 {
            return Err(Error::Config("max_len is too small".into()));
        }
        self.head.validate()?;
        self.train.validate()?;
        if let DataSource::Fixture(f) = &self.data {
            f.validate()?;
        }
        Ok(())
    }

    /// The trainer configuration for one seed of this experiment.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let spec = self.method.spec();
        TrainConfig {
            use_unlabeled: spec.use_unlabeled,
            gate_mode: spec.gate_mode,
            csr_updates: spec.csr_updates,
            prediction_head: spec.prediction_head,
            seed,
            ..self.train.clone()
        }
    }

    fn canonical_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> Result<String> {
        let text = serde_json::to_string(&self.canonical_json()?)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Hash of everything except the method, so runs that should be
    /// comparable share it.
    pub fn parity_hash(&self) -> Result<String> {
        self.with_method(Method::Pcm).config_hash()
    }

    /// JSON paths at which two configurations differ.
    pub fn diff(&self, other: &Self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        json_diff("", &self.canonical_json()?, &other.canonical_json()?, &mut out);
        Ok(out)
    }
}

fn json_diff(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(&p, u, v, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.gate.confid1, 0.95);
        assert_eq!(c.train.gate.confid2, 0.7);
        assert_eq!(c.train.mining.top_j, 75);
        assert_eq!(c.head.hidden_size, 128);
        assert_eq!((c.train.encoder_lr, c.train.head_lr), (5e-6, 5e-4));
        assert_eq!(c.max_len, 256);
    }

    #[test]
    fn methods_roundtrip_through_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("mixtext".parse::<Method>().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::fixture(Method::Pcm);
        assert_eq!(a.config_hash().unwrap(), a.clone().config_hash().unwrap());
        let mut b = a.clone();
        b.train.gate.confid1 = 0.9;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 64);
    }

    #[test]
    fn methods_share_parity_hash() {
        let base = ExperimentConfig::fixture(Method::Pcm);
        let hashes: std::collections::HashSet<String> = Method::ALL
            .iter()
            .map(|&m| base.with_method(m).parity_hash().unwrap())
            .collect();
        assert_eq!(hashes.len(), 1);
    }

    #[test]
    fn dcdl_differs_from_pcm_only_in_method() {
        let pcm = ExperimentConfig::fixture(Method::Pcm);
        let dcdl = pcm.with_method(Method::UdaDcdl);
        assert_eq!(pcm.diff(&dcdl).unwrap(), vec!["method".to_string()]);
        let (p, d) = (Method::Pcm.spec(), Method::UdaDcdl.spec());
        assert!(p.layout.uses_csr() && !d.layout.uses_csr());
        assert_eq!((p.gate_mode, p.use_unlabeled), (d.gate_mode, d.use_unlabeled));
    }

    #[test]
    fn config_roundtrips_through_json() {
        let c = ExperimentConfig::fixture(Method::Uda);
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
