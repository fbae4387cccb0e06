#![allow(dead_code)]

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use pcm_core::csr::EncoderEmbedder;
use pcm_core::data::Truncation;
use pcm_core::model::DualHeadOutputs;
use pcm_core::ssl::PseudoTarget;
use pcm_core::{BertEncoder, CsrSet, EncoderConfig, LayoutSpec, Precision, TextTokenizer, TokenizedText, WordTokenizer};

pub const EPS: f64 = 1e-7;

pub const TEXTS: [&str; 6] = [
    "the election and the treaty",
    "a striker for the league",
    "shares and profit rose",
    "the telescope saw a galaxy",
    "minister of the embassy",
    "coach of the playoffs team",
];

pub const SEED_WORDS: [[&str; 2]; 4] = [
    ["election", "treaty"],
    ["striker", "league"],
    ["shares", "profit"],
    ["telescope", "galaxy"],
];

pub struct Toy {
    pub tokenizer: WordTokenizer,
    pub encoder: BertEncoder,
    pub spec: LayoutSpec,
    pub texts: Vec<TokenizedText>,
}

impl Toy {
    /// A 2-layer toy encoder small enough for finite differences.
    pub fn new(precision: Precision, hidden: usize, seed: u64) -> Self {
        let tokenizer = WordTokenizer::from_texts(TEXTS.iter().copied(), 1);
        let mut cfg = EncoderConfig::toy(tokenizer.vocab_size());
        cfg.hidden_size = hidden;
        cfg.intermediate_size = 2 * hidden;
        cfg.num_heads = 2;
        cfg.max_positions = 32;
        cfg.precision = precision;
        let encoder = BertEncoder::init(cfg, seed).unwrap();
        let spec = LayoutSpec {
            max_len: 32,
            truncation: Truncation::Head,
            specials: tokenizer.specials(),
        };
        let texts = TEXTS.iter().map(|t| tokenizer.tokenize(t).unwrap()).collect();
        Self {
            tokenizer,
            encoder,
            spec,
            texts,
        }
    }

    pub fn csr(&self) -> CsrSet {
        let words: Vec<Vec<String>> = SEED_WORDS.iter().map(|w| w.iter().map(|s| s.to_string()).collect()).collect();
        let embedder = EncoderEmbedder {
            tokenizer: &self.tokenizer,
            encoder: &self.encoder,
        };
        CsrSet::from_seed_words(&words, &embedder).unwrap()
    }

    pub fn refs(&self) -> Vec<&TokenizedText> {
        self.texts.iter().collect()
    }
}

pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            softmax(&logits)
        })
        .collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..k).map(|_| rng.gen_range(0.01..0.99)).collect()).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn outputs(ps: Option<&Vec<Vec<f64>>>, pm: Option<&Vec<Vec<f64>>>) -> DualHeadOutputs {
    let t = |v: &Vec<Vec<f64>>| Tensor::new(v.clone(), &Device::Cpu).unwrap();
    let rows = ps.or(pm).map_or(0, Vec::len);
    DualHeadOutputs {
        semantic_logits: None,
        semantic_probs: ps.map(t),
        matching_logits: None,
        matching_probs: pm.map(t),
        empty_text: vec![false; rows],
    }
}

fn clog(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS).ln()
}

/// Scalar-loop labeled loss: mean of CE(ps) + sum_k BCE(pm).
pub fn labeled_oracle(ps: &[Vec<f64>], pm: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total -= clog(ps[r][y]);
        for (k, &p) in pm[r].iter().enumerate() {
            total -= if k == y { clog(p) } else { clog(1.0 - p) };
        }
    }
    total / labels.len() as f64
}

/// Scalar-loop consistency loss over gated rows: KL(target || q) plus
/// BCE of pm against the one-hot pseudo-label.
pub fn unlabeled_oracle(q: &[Vec<f64>], pm: &[Vec<f64>], targets: &[PseudoTarget]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        if !t.passed {
            continue;
        }
        n += 1;
        let p = t.sharpened.as_ref().unwrap();
        let y = t.label.unwrap();
        for k in 0..p.len() {
            total += p[k] * (clog(p[k]) - clog(q[r][k]));
            total -= if k == y { clog(pm[r][k]) } else { clog(1.0 - pm[r][k]) };
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
