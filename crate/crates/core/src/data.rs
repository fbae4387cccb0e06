//! Corpus ingestion, label subsampling, truncation and augmentation pairs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedText;

/// Which end of an over-long text is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Keep the leading window.
    #[default]
    Head,
    /// Keep the trailing window (IMDB reviews put the verdict at the end).
    Tail,
}

/// Cuts `text` to at most `budget` pieces from the chosen end. Idempotent.
pub fn truncate(text: &TokenizedText, budget: usize, side: Truncation) -> TokenizedText {
    let n = text.len();
    if n <= budget {
        return text.clone();
    }
    match side {
        Truncation::Head => text.slice(0..budget),
        Truncation::Tail => text.slice(n - budget..n),
    }
}

/// Published statistics of the benchmark corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusMeta {
    pub name: &'static str,
    pub classes: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub truncation: Truncation,
}

pub const KNOWN_CORPORA: [CorpusMeta; 4] = [
    CorpusMeta {
        name: "ag_news",
        classes: 4,
        unlabeled: 20_000,
        test: 7_600,
        truncation: Truncation::Head,
    },
    CorpusMeta {
        name: "dbpedia",
        classes: 14,
        unlabeled: 70_000,
        test: 70_000,
        truncation: Truncation::Head,
    },
    CorpusMeta {
        name: "yahoo_answers",
        classes: 10,
        unlabeled: 50_000,
        test: 60_000,
        truncation: Truncation::Head,
    },
    CorpusMeta {
        name: "imdb",
        classes: 2,
        unlabeled: 10_000,
        test: 25_000,
        truncation: Truncation::Tail,
    },
];

pub fn corpus_meta(name: &str) -> Option<&'static CorpusMeta> {
    let norm = name
        .to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_");
    let norm = norm.as_str();
    KNOWN_CORPORA.iter().find(|m| {
        m.name == norm || (m.name == "yahoo_answers" && norm == "yahoo") || (m.name == "ag_news" && norm == "agnews")
    })
}

pub fn truncation_for(name: &str) -> Truncation {
    corpus_meta(name).map_or(Truncation::Head, |m| m.truncation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    ValidationUnlabeled,
    Test,
}

impl Split {
    pub fn has_labels(self) -> bool {
        matches!(self, Split::TrainLabeled | Split::Test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub num_classes: usize,
    pub texts: Vec<String>,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        texts: Vec<String>,
        labels: Option<Vec<usize>>,
        split: Split,
    ) -> Result<Self> {
        let c = Self {
            name: name.into(),
            num_classes,
            texts,
            labels,
            split,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.has_labels() != self.labels.is_some() {
            return Err(Error::Data(format!(
                "{}: labels must be present exactly for labeled splits ({:?})",
                self.name, self.split
            )));
        }
        if let Some(meta) = corpus_meta(&self.name) {
            if meta.classes != self.num_classes {
                return Err(Error::Data(format!(
                    "{} has {} classes, not {}",
                    meta.name, meta.classes, self.num_classes
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.texts.len() {
                return Err(Error::Data(format!(
                    "{}: {} labels for {} texts",
                    self.name,
                    labels.len(),
                    self.texts.len()
                )));
            }
            let bad: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l >= self.num_classes)
                .map(|(i, _)| i)
                .collect();
            if !bad.is_empty() {
                return Err(Error::Data(format!(
                    "{}: labels outside [0, {}) on rows {:?}",
                    self.name, self.num_classes, bad
                )));
            }
        }
        Ok(())
    }
}

/// Reads a delimited file with a header row containing a `text` column and,
/// for labeled splits, a `label` column of integer class ids.
/// `num_classes` defaults to the published count for known corpus names.
pub fn load_corpus(
    path: &Path,
    name: &str,
    split: Split,
    num_classes: Option<usize>,
    delimiter: u8,
) -> Result<Corpus> {
    let num_classes = num_classes
        .or_else(|| corpus_meta(name).map(|m| m.classes))
        .ok_or_else(|| Error::Config(format!("unknown corpus {name}: give the class count")))?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |want: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(want));
    let text_col = col("text")
        .ok_or_else(|| Error::Data(format!("{}: header lacks a `text` column", path.display())))?;
    let label_col = col("label");
    if split.has_labels() && label_col.is_none() {
        return Err(Error::Data(format!(
            "{}: labeled split needs a `label` column",
            path.display()
        )));
    }
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    let mut bad_rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        texts.push(record.get(text_col).unwrap_or_default().to_string());
        if let (true, Some(lc)) = (split.has_labels(), label_col) {
            match record.get(lc).unwrap_or_default().trim().parse::<usize>() {
                Ok(l) if l < num_classes => labels.push(l),
                _ => {
                    bad_rows.push(row + 1);
                    labels.push(0);
                }
            }
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: labels outside [0, {num_classes}) on data rows {bad_rows:?}",
            path.display()
        )));
    }
    if texts.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Corpus::new(
        name,
        num_classes,
        texts,
        split.has_labels().then_some(labels),
        split,
    )
}

/// Which training rows are labeled, unlabeled, or held out for the
/// label-free validation signal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub corpus: String,
    pub seed: u64,
    pub labels_per_class: usize,
    /// Per class, sorted training-row indices.
    pub labeled: Vec<Vec<usize>>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub unlabeled_pool_size: usize,
}

impl SplitManifest {
    pub fn labeled_rows(&self) -> Vec<(usize, usize)> {
        self.labeled
            .iter()
            .enumerate()
            .flat_map(|(c, rows)| rows.iter().map(move |&r| (r, c)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Draws `n_per_class` labeled rows per class. The remaining rows, capped at
/// `unlabeled_cap`, form the unlabeled pool; `validation_fraction` of that
/// pool is held out as the unlabeled validation set.
pub fn subsample_labels(
    corpus: &Corpus,
    n_per_class: usize,
    seed: u64,
    validation_fraction: f64,
    unlabeled_cap: Option<usize>,
) -> Result<SplitManifest> {
    let labels = corpus
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: subsampling needs labels", corpus.name)))?;
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {validation_fraction} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::with_capacity(corpus.num_classes);
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    for class in 0..corpus.num_classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.len() < n_per_class {
            return Err(Error::Data(format!(
                "{}: class {class} has {} training rows, fewer than the {n_per_class} requested",
                corpus.name,
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let mut pick = rows[..n_per_class].to_vec();
        pick.sort_unstable();
        taken.extend(&pick);
        labeled.push(pick);
    }
    let mut pool: Vec<usize> = (0..labels.len()).filter(|i| !taken.contains(i)).collect();
    pool.shuffle(&mut rng);
    if let Some(cap) = unlabeled_cap {
        pool.truncate(cap);
    }
    let pool_size = pool.len();
    let n_val = (pool_size as f64 * validation_fraction).round() as usize;
    let mut validation = pool[..n_val].to_vec();
    let mut unlabeled = pool[n_val..].to_vec();
    validation.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitManifest {
        corpus: corpus.name.clone(),
        seed,
        labels_per_class: n_per_class,
        labeled,
        unlabeled,
        validation,
        unlabeled_pool_size: pool_size,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub original: String,
    pub augmented: String,
    /// Pivot-language tag for back-translations, or `"fallback"`.
    pub source: String,
}

/// Reads augmentations index-aligned with `originals` (the training file).
/// The file has a header with an `augmented` column and optional `original`
/// and `source` columns.
pub fn load_augmentations(path: &Path, originals: &[String]) -> Result<Vec<AugmentedPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |want: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(want));
    let aug_col = col("augmented").ok_or_else(|| {
        Error::Data(format!("{}: header lacks an `augmented` column", path.display()))
    })?;
    let source_col = col("source");
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record?;
        let i = pairs.len();
        let original = originals.get(i).cloned().unwrap_or_default();
        pairs.push(AugmentedPair {
            original,
            augmented: record.get(aug_col).unwrap_or_default().to_string(),
            source: source_col
                .and_then(|c| record.get(c))
                .unwrap_or("file")
                .to_string(),
        });
    }
    if pairs.len() != originals.len() {
        return Err(Error::Data(format!(
            "{}: {} augmentations for {} texts",
            path.display(),
            pairs.len(),
            originals.len()
        )));
    }
    if let Some(i) = pairs.iter().position(|p| p.original.is_empty()) {
        return Err(Error::Data(format!("{}: original text {i} is empty", path.display())));
    }
    Ok(pairs)
}

/// Word-level perturbation used when no back-translations are available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FallbackAugment {
    /// Per-word drop probability, at most 0.1.
    pub dropout: f64,
    /// Maximum displacement window for the local shuffle, at most 3.
    pub window: usize,
}

impl Default for FallbackAugment {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            window: 3,
        }
    }
}

/// Deterministic in `(text, seed)`. Drops words with probability
/// `dropout` (never all of them), then shuffles locally so each word moves
/// fewer than `window` positions.
pub fn fallback_augment(text: &str, seed: u64, cfg: FallbackAugment) -> Result<AugmentedPair> {
    if !(0.0..=0.1).contains(&cfg.dropout) || cfg.window == 0 || cfg.window > 3 {
        return Err(Error::Config(format!(
            "fallback augmentation needs dropout in [0, 0.1] and window in 1..=3, got {cfg:?}"
        )));
    }
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(text.as_bytes())
        .finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut kept: Vec<&str> = words
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= cfg.dropout)
        .collect();
    if kept.is_empty() {
        kept = words.clone();
    }
    let mut keyed: Vec<(f64, &str)> = kept
        .into_iter()
        .enumerate()
        .map(|(i, w)| (i as f64 + rng.gen::<f64>() * cfg.window as f64, w))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(AugmentedPair {
        original: text.to_string(),
        augmented: keyed.into_iter().map(|(_, w)| w).collect::<Vec<_>>().join(" "),
        source: "fallback".into(),
    })
}
