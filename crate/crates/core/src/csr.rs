//! Class semantic representations (CSRs): per-class lists of the words an
//! encoder attends to most, averaged into one input-embedding vector that is
//! injected as a pseudo-token after the sentence.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::{BertEncoder, EncodedBatch, EncoderOutput, LayoutSpec};
use crate::error::{Error, Result};
use crate::tokenizer::{TextTokenizer, TokenizedText};

pub const DEFAULT_TOP_J: usize = 75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordSource {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWord {
    pub word: String,
    pub score: f64,
    pub source: WordSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSemanticRepresentation {
    pub class_id: usize,
    pub words: Vec<ScoredWord>,
    pub embedding: Vec<f64>,
    pub version: u64,
}

/// The active CSRs for all `K` classes. Immutable once built; updates
/// produce a new set with `version + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrSet {
    pub version: u64,
    /// Validation count that triggered this version (absent for version 0).
    pub qualifying_count: Option<usize>,
    pub classes: Vec<ClassSemanticRepresentation>,
}

impl CsrSet {
    pub fn new(classes: Vec<ClassSemanticRepresentation>, version: u64) -> Self {
        Self {
            version,
            qualifying_count: None,
            classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.embedding.len())
    }

    /// `[K, dim]` tensor of the CSR embeddings.
    pub fn embeddings(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let k = self.num_classes();
        let dim = self.dim();
        let flat: Vec<f64> = self
            .classes
            .iter()
            .flat_map(|c| c.embedding.iter().copied())
            .collect();
        if flat.len() != k * dim {
            return Err(Error::Config("CSR embeddings have unequal dimensions".into()));
        }
        Ok(Tensor::from_vec(flat, (k, dim), device)?.to_dtype(dtype)?)
    }

    /// Lays out `texts` with one slot per class, bound to this version.
    pub fn encode(&self, texts: &[&TokenizedText], spec: &LayoutSpec) -> EncodedBatch {
        EncodedBatch::with_csr_slots(texts, self.num_classes(), self.version, spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSRs from hand-picked seed words, one list per class. Exploration
    /// only: it injects prior knowledge the automatic procedure avoids.
    pub fn from_seed_words(words: &[Vec<String>], embedder: &dyn WordEmbedder) -> Result<Self> {
        let classes = words
            .iter()
            .enumerate()
            .map(|(class_id, list)| {
                let words: Vec<ScoredWord> = list
                    .iter()
                    .map(|w| ScoredWord {
                        word: w.to_lowercase(),
                        score: 1.0,
                        source: WordSource::Labeled,
                    })
                    .collect();
                let embedding = average_embedding(&words, embedder)?;
                Ok(ClassSemanticRepresentation {
                    class_id,
                    words,
                    embedding,
                    version: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(classes, 0))
    }
}

/// Stop-word filter. The bundled list is fixed and versioned; punctuation
/// and pure numbers are always filtered.
#[derive(Debug, Clone)]
pub struct StopWords {
    words: HashSet<String>,
}

impl Default for StopWords {
    fn default() -> Self {
        Self::parse(include_str!("../assets/stopwords_en_v1.txt"))
    }
}

impl StopWords {
    pub const VERSION: &'static str = "en-v1";

    pub fn parse(text: &str) -> Self {
        Self {
            words: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        }
    }

    pub fn is_filtered(&self, word: &str) -> bool {
        if !word.chars().any(char::is_alphanumeric) {
            return true;
        }
        if word
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.' || c == ',')
        {
            return true;
        }
        self.words.contains(word)
    }
}

/// How a word's per-occurrence scores combine across sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreAggregation {
    /// Sum over occurrences: frequent and attended words rank highest.
    #[default]
    Sum,
    /// Mean over occurrences.
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WordStats {
    pub score: f64,
    pub count: usize,
    pub labeled_count: usize,
}

/// Accumulated attention mass per class and word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScoreTable {
    pub classes: Vec<BTreeMap<String, WordStats>>,
}

impl AttentionScoreTable {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![BTreeMap::new(); num_classes],
        }
    }

    /// Adds one sentence. `piece_scores[i]` is the received attention of
    /// piece `i` of `text`; a word scores the mean of its pieces.
    pub fn add_sentence(
        &mut self,
        text: &TokenizedText,
        piece_scores: &[f64],
        class: usize,
        source: WordSource,
        stopwords: &StopWords,
    ) {
        let mut per_word = vec![(0.0, 0usize); text.words.len()];
        for (&w, &s) in text.word_of.iter().zip(piece_scores) {
            per_word[w].0 += s;
            per_word[w].1 += 1;
        }
        for (word, (sum, n)) in text.words.iter().zip(per_word) {
            if n == 0 || stopwords.is_filtered(word) {
                continue;
            }
            let stats = self.classes[class].entry(word.clone()).or_default();
            stats.score += sum / n as f64;
            stats.count += 1;
            if source == WordSource::Labeled {
                stats.labeled_count += 1;
            }
        }
    }

    /// Words of `class` ranked by aggregated score, ties broken
    /// lexicographically.
    pub fn ranked(&self, class: usize, aggregation: ScoreAggregation) -> Vec<ScoredWord> {
        let mut words: Vec<ScoredWord> = self.classes[class]
            .iter()
            .map(|(w, s)| ScoredWord {
                word: w.clone(),
                score: match aggregation {
                    ScoreAggregation::Sum => s.score,
                    ScoreAggregation::Mean => s.score / s.count as f64,
                },
                source: if s.labeled_count > 0 {
                    WordSource::Labeled
                } else {
                    WordSource::Unlabeled
                },
            })
            .collect();
        words.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
        words
    }
}

/// Attention each position receives in the last layer: the mean over heads
/// and over unmasked query positions. Masked positions score 0, so each
/// row sums to 1.
pub fn token_attention_received(output: &EncoderOutput, batch: &EncodedBatch) -> Result<Vec<Vec<f64>>> {
    let att = output.attention.to_dtype(DType::F64)?.mean(1)?; // [b, q, t]
    let mask: Vec<f64> = batch.attention_mask.iter().map(|&m| m as f64).collect();
    let mask = Tensor::from_vec(mask, (batch.rows, batch.seq_len), att.device())?;
    let counts = mask.sum_keepdim(D::Minus1)?; // [b, 1]
    let received = mask
        .unsqueeze(1)?
        .matmul(&att)?
        .squeeze(1)?
        .broadcast_div(&counts)?
        .mul(&mask)?;
    Ok(received.to_vec2::<f64>()?)
}

/// Adds every row of `batch` to `table` under its class.
pub fn accumulate_class_words(
    table: &mut AttentionScoreTable,
    batch: &EncodedBatch,
    scores: &[Vec<f64>],
    classes: &[usize],
    sources: &[WordSource],
    stopwords: &StopWords,
) {
    for r in 0..batch.rows {
        let span = batch.text_spans[r].clone();
        table.add_sentence(&batch.texts[r], &scores[r][span], classes[r], sources[r], stopwords);
    }
}

/// Subword-piece input embeddings of a word.
pub trait WordEmbedder {
    fn dim(&self) -> usize;
    fn piece_embeddings(&self, word: &str) -> Result<Vec<Vec<f64>>>;
}

/// Looks words up in an encoder's input embedding table.
pub struct EncoderEmbedder<'a> {
    pub tokenizer: &'a dyn TextTokenizer,
    pub encoder: &'a BertEncoder,
}

impl WordEmbedder for EncoderEmbedder<'_> {
    fn dim(&self) -> usize {
        self.encoder.config().hidden_size
    }

    fn piece_embeddings(&self, word: &str) -> Result<Vec<Vec<f64>>> {
        let t = self.tokenizer.tokenize(word)?;
        self.encoder.word_embedding_rows(&t.ids)
    }
}

/// Mean over all subword pieces of all words.
pub fn average_embedding(words: &[ScoredWord], embedder: &dyn WordEmbedder) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; embedder.dim()];
    let mut n = 0usize;
    for w in words {
        for piece in embedder.piece_embeddings(&w.word)? {
            for (s, v) in sum.iter_mut().zip(piece) {
                *s += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("CSR word list yields no subword pieces".into()));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Builds the CSR of one class: the `top_j` best-ranked words and their
/// averaged embedding.
pub fn build_class_csr(
    table: &AttentionScoreTable,
    class: usize,
    top_j: usize,
    aggregation: ScoreAggregation,
    embedder: &dyn WordEmbedder,
    version: u64,
) -> Result<ClassSemanticRepresentation> {
    let mut words = table.ranked(class, aggregation);
    if words.is_empty() {
        return Err(Error::EmptyClass { class });
    }
    words.truncate(top_j);
    let embedding = average_embedding(&words, embedder)?;
    Ok(ClassSemanticRepresentation {
        class_id: class,
        words,
        embedding,
        version,
    })
}

pub fn build_csr(
    table: &AttentionScoreTable,
    top_j: usize,
    aggregation: ScoreAggregation,
    embedder: &dyn WordEmbedder,
    version: u64,
) -> Result<CsrSet> {
    if top_j == 0 {
        return Err(Error::Config("top_j must be positive".into()));
    }
    let classes = (0..table.classes.len())
        .map(|c| build_class_csr(table, c, top_j, aggregation, embedder, version))
        .collect::<Result<Vec<_>>>()?;
    Ok(CsrSet::new(classes, version))
}

/// One sentence contributing to CSR mining.
#[derive(Debug, Clone, Copy)]
pub struct MiningSentence<'a> {
    pub text: &'a TokenizedText,
    pub class: usize,
    pub source: WordSource,
}

/// How sentences are laid out while mining: the plain classifier format
/// (initialization) or with the active CSR slots (updates).
#[derive(Debug, Clone, Copy)]
pub enum MiningInput<'a> {
    Plain,
    WithCsr(&'a CsrSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub top_j: usize,
    pub aggregation: ScoreAggregation,
    pub batch_size: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            top_j: DEFAULT_TOP_J,
            aggregation: ScoreAggregation::Sum,
            batch_size: 16,
        }
    }
}

/// Runs the encoder over `sentences` in evaluation mode and accumulates the
/// received attention of their words.
pub fn mine_attention_table(
    encoder: &BertEncoder,
    sentences: &[MiningSentence<'_>],
    num_classes: usize,
    input: MiningInput<'_>,
    layout: &LayoutSpec,
    stopwords: &StopWords,
    batch_size: usize,
) -> Result<AttentionScoreTable> {
    let mut table = AttentionScoreTable::new(num_classes);
    let slots = match input {
        MiningInput::Plain => None,
        MiningInput::WithCsr(csr) => Some(csr.embeddings(encoder.dtype(), encoder.device())?),
    };
    for chunk in sentences.chunks(batch_size.max(1)) {
        let texts: Vec<&TokenizedText> = chunk.iter().map(|s| s.text).collect();
        let batch = match input {
            MiningInput::Plain => EncodedBatch::plain(&texts, layout),
            MiningInput::WithCsr(csr) => csr.encode(&texts, layout),
        };
        let out = encoder.forward(&batch, slots.as_ref(), None)?;
        let scores = token_attention_received(&out, &batch)?;
        let classes: Vec<usize> = chunk.iter().map(|s| s.class).collect();
        let sources: Vec<WordSource> = chunk.iter().map(|s| s.source).collect();
        accumulate_class_words(&mut table, &batch, &scores, &classes, &sources, stopwords);
    }
    Ok(table)
}

/// Recomputes all CSRs from scratch with the current encoder over the
/// labeled sentences plus the qualifying pseudo-labeled ones. A class that
/// ends up with no scored words keeps its previous CSR.
#[allow(clippy::too_many_arguments)]
pub fn update_csr(
    current: &CsrSet,
    labeled: &[(&TokenizedText, usize)],
    qualifying: &[(&TokenizedText, usize)],
    encoder: &BertEncoder,
    tokenizer: &dyn TextTokenizer,
    layout: &LayoutSpec,
    stopwords: &StopWords,
    mining: &MiningConfig,
) -> Result<CsrSet> {
    let sentences: Vec<MiningSentence<'_>> = labeled
        .iter()
        .map(|&(text, class)| MiningSentence {
            text,
            class,
            source: WordSource::Labeled,
        })
        .chain(qualifying.iter().map(|&(text, class)| MiningSentence {
            text,
            class,
            source: WordSource::Unlabeled,
        }))
        .collect();
    let table = mine_attention_table(
        encoder,
        &sentences,
        current.num_classes(),
        MiningInput::WithCsr(current),
        layout,
        stopwords,
        mining.batch_size,
    )?;
    let embedder = EncoderEmbedder { tokenizer, encoder };
    let version = current.version + 1;
    let classes = (0..current.num_classes())
        .map(|c| {
            match build_class_csr(&table, c, mining.top_j, mining.aggregation, &embedder, version) {
                Ok(csr) => Ok(csr),
                Err(Error::EmptyClass { class }) => {
                    log::warn!("class {class}: no scored words, keeping its previous CSR");
                    Ok(ClassSemanticRepresentation {
                        version,
                        ..current.classes[c].clone()
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CsrSet::new(classes, version))
}

/// Fires when the number of validation samples passing the gate strictly
/// exceeds every previous count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateTrigger {
    pub running_max: usize,
}

impl UpdateTrigger {
    pub fn check(&mut self, qualifying_count: usize) -> bool {
        if qualifying_count > self.running_max {
            self.running_max = qualifying_count;
            true
        } else {
            false
        }
    }
}

/// Per-token class affinity of a raw pretrained encoder for
/// `[CLS] text [SEP] w_1 .. w_K [SEP]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchProbeResult {
    pub text: String,
    pub class_words: Vec<String>,
    pub tokens: Vec<String>,
    /// Class whose word each text token attends to most.
    pub best_class: Vec<usize>,
    /// Attention from each text token to its best class word.
    pub attention_value: Vec<f64>,
    /// `[token][class]` head-averaged attention.
    pub attention: Vec<Vec<f64>>,
    /// Cosine between the mean text-token feature and each class word's feature.
    pub cosine: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn mean_rows(rows: &[Vec<f64>], idx: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut sum = vec![0.0; rows.first().map_or(0, Vec::len)];
    let mut n = 0;
    for i in idx {
        for (s, v) in sum.iter_mut().zip(&rows[i]) {
            *s += v;
        }
        n += 1;
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

pub fn probe_inherent_matching(
    encoder: &BertEncoder,
    tokenizer: &dyn TextTokenizer,
    text: &str,
    class_words: &[&str],
    layout: &LayoutSpec,
) -> Result<MatchProbeResult> {
    if class_words.is_empty() {
        return Err(Error::Config("probe needs at least one class word".into()));
    }
    let tokens = tokenizer.tokenize(text)?;
    let words = class_words
        .iter()
        .map(|w| tokenizer.tokenize(w))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = words.iter().position(TokenizedText::is_empty) {
        return Err(Error::Config(format!("class word {:?} has no tokens", class_words[i])));
    }
    let batch = EncodedBatch::with_class_words(&[&tokens], &words, layout);
    let out = encoder.forward(&batch, None, None)?;
    let att: Vec<Vec<f64>> = out
        .attention
        .get(0)?
        .to_dtype(DType::F64)?
        .mean(0)?
        .to_vec2()?; // [q, t]
    let feats: Vec<Vec<f64>> = out.features.get(0)?.to_dtype(DType::F64)?.to_vec2()?;
    let span = batch.text_spans[0].clone();
    let spans = &batch.class_word_spans[0];
    let kept = &batch.texts[0];
    let unk = tokenizer.specials().unk;

    let mut attention = Vec::with_capacity(span.len());
    let mut best_class = Vec::with_capacity(span.len());
    let mut attention_value = Vec::with_capacity(span.len());
    let mut token_strings = Vec::with_capacity(span.len());
    for (i, q) in span.clone().enumerate() {
        let per_class: Vec<f64> = spans
            .iter()
            .map(|s| s.clone().map(|t| att[q][t]).sum::<f64>() / s.len() as f64)
            .collect();
        let (best, value) = per_class
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
        best_class.push(best);
        attention_value.push(value);
        attention.push(per_class);
        let id = kept.ids[i];
        token_strings.push(if id == unk {
            kept.words[kept.word_of[i]].clone()
        } else {
            tokenizer.id_to_token(id).unwrap_or_default()
        });
    }
    let sentence = mean_rows(&feats, span);
    let cosines = spans
        .iter()
        .map(|s| cosine(&sentence, &mean_rows(&feats, s.clone())))
        .collect();
    Ok(MatchProbeResult {
        text: text.to_string(),
        class_words: class_words.iter().map(|s| s.to_string()).collect(),
        tokens: token_strings,
        best_class,
        attention_value,
        attention,
        cosine: cosines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct FixedEmbedder(HashMap<String, Vec<Vec<f64>>>);

    impl WordEmbedder for FixedEmbedder {
        fn dim(&self) -> usize {
            2
        }
        fn piece_embeddings(&self, word: &str) -> Result<Vec<Vec<f64>>> {
            Ok(self.0.get(word).cloned().unwrap_or_else(|| vec![vec![0.0, 0.0]]))
        }
    }

    fn embedder() -> FixedEmbedder {
        FixedEmbedder(
            [
                ("a", vec![vec![1.0, 0.0]]),
                ("b", vec![vec![0.0, 1.0]]),
                ("c", vec![vec![1.0, 1.0]]),
                ("split", vec![vec![2.0, 0.0], vec![0.0, 2.0]]),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        )
    }

    fn sentence(words: &[&str]) -> TokenizedText {
        TokenizedText {
            ids: vec![0; words.len()],
            word_of: (0..words.len()).collect(),
            words: words.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn attention_output(rows: Vec<Vec<Vec<Vec<f64>>>>) -> EncoderOutput {
        let b = rows.len();
        let h = rows[0].len();
        let s = rows[0][0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().flatten().flatten().collect();
        let att = Tensor::from_vec(flat, (b, h, s, s), &Device::Cpu).unwrap();
        EncoderOutput {
            features: att.clone(),
            attention: att,
        }
    }

    fn batch_of(seq: usize, unmasked: usize) -> EncodedBatch {
        EncodedBatch {
            rows: 1,
            seq_len: seq,
            token_ids: vec![0; seq],
            attention_mask: (0..seq).map(|i| u8::from(i < unmasked)).collect(),
            segment_ids: vec![0; seq],
            position_ids: (0..seq as u32).collect(),
            text_spans: vec![0..unmasked],
            csr_slots: vec![vec![]],
            class_word_spans: vec![vec![]],
            texts: vec![TokenizedText::empty()],
            empty_text: vec![false],
            csr_version: None,
        }
    }

    #[test]
    fn received_attention_hand_case() {
        let out = attention_output(vec![vec![vec![vec![0.9, 0.1], vec![0.6, 0.4]]]]);
        let r = token_attention_received(&out, &batch_of(2, 2)).unwrap();
        assert!((r[0][0] - 0.75).abs() < 1e-12);
        assert!((r[0][1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn received_attention_uniform_and_masked() {
        // 3 unmasked of 4 positions, two heads, uniform over unmasked keys.
        let row = vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        let head = vec![row.clone(), row.clone(), row.clone(), row];
        let out = attention_output(vec![vec![head.clone(), head]]);
        let r = token_attention_received(&out, &batch_of(4, 3)).unwrap();
        for t in 0..3 {
            assert!((r[0][t] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(r[0][3], 0.0);
        assert!((r[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stop_word_sentences_leave_table_unchanged() {
        let sw = StopWords::default();
        let mut t = AttentionScoreTable::new(2);
        t.add_sentence(&sentence(&["the", "of", ",", "42"]), &[0.1, 0.2, 0.3, 0.4], 0, WordSource::Labeled, &sw);
        assert_eq!(t, AttentionScoreTable::new(2));
    }

    #[test]
    fn occurrences_accumulate() {
        let sw = StopWords::default();
        let mut t = AttentionScoreTable::new(1);
        t.add_sentence(&sentence(&["bomb"]), &[0.2], 0, WordSource::Labeled, &sw);
        t.add_sentence(&sentence(&["bomb"]), &[0.4], 0, WordSource::Unlabeled, &sw);
        let s = t.classes[0]["bomb"];
        assert!((s.score - 0.6).abs() < 1e-12);
        assert_eq!(s.count, 2);
        assert!((t.ranked(0, ScoreAggregation::Mean)[0].score - 0.3).abs() < 1e-12);
    }

    #[test]
    fn subword_pieces_average() {
        let sw = StopWords::default();
        let text = TokenizedText {
            ids: vec![7, 8],
            word_of: vec![0, 0],
            words: vec!["playing".into()],
        };
        let mut t = AttentionScoreTable::new(1);
        t.add_sentence(&text, &[0.1, 0.3], 0, WordSource::Labeled, &sw);
        assert!((t.classes[0]["playing"].score - 0.2).abs() < 1e-12);
    }

    fn table(scores: &[(&str, f64)]) -> AttentionScoreTable {
        let mut t = AttentionScoreTable::new(1);
        for &(w, s) in scores {
            t.classes[0].insert(
                w.into(),
                WordStats {
                    score: s,
                    count: 1,
                    labeled_count: 1,
                },
            );
        }
        t
    }

    #[test]
    fn build_takes_top_j() {
        let t = table(&[("a", 0.9), ("b", 0.5), ("c", 0.1)]);
        let csr = build_csr(&t, 2, ScoreAggregation::Sum, &embedder(), 0).unwrap();
        let words: Vec<&str> = csr.classes[0].words.iter().map(|w| w.word.as_str()).collect();
        assert_eq!(words, vec!["a", "b"]);
        assert_eq!(csr.classes[0].embedding, vec![0.5, 0.5]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let t = table(&[("c", 0.5), ("a", 0.5), ("b", 0.5)]);
        let csr = build_csr(&t, 2, ScoreAggregation::Sum, &embedder(), 0).unwrap();
        let words: Vec<&str> = csr.classes[0].words.iter().map(|w| w.word.as_str()).collect();
        assert_eq!(words, vec!["a", "b"]);
    }

    #[test]
    fn embedding_averages_all_pieces() {
        let t = table(&[("split", 1.0), ("a", 0.5)]);
        let csr = build_csr(&t, 5, ScoreAggregation::Sum, &embedder(), 0).unwrap();
        // pieces: [2,0], [0,2], [1,0] -> mean [1, 2/3]
        let e = &csr.classes[0].embedding;
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_word_vectors_give_that_vector() {
        let emb = FixedEmbedder(
            [("x", vec![vec![0.3, -0.7]]), ("y", vec![vec![0.3, -0.7]])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        );
        let t = table(&[("x", 0.4), ("y", 0.2)]);
        let csr = build_csr(&t, 75, ScoreAggregation::Sum, &emb, 0).unwrap();
        assert_eq!(csr.classes[0].embedding, vec![0.3, -0.7]);
    }

    #[test]
    fn empty_class_names_the_class() {
        let mut t = table(&[("a", 1.0)]);
        t.classes.push(BTreeMap::new());
        match build_csr(&t, 3, ScoreAggregation::Sum, &embedder(), 0) {
            Err(Error::EmptyClass { class }) => assert_eq!(class, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trigger_fires_on_strict_increase_only() {
        let mut trig = UpdateTrigger::default();
        let fired: Vec<bool> = [10, 12, 12, 15].iter().map(|&c| trig.check(c)).collect();
        // The first check exceeds the initial maximum of 0.
        assert_eq!(fired, vec![true, true, false, true]);
        let mut fresh = UpdateTrigger::default();
        assert!(!fresh.check(0));
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[("a", 0.9), ("b", 0.5)]);
        let mut csr = build_csr(&t, 2, ScoreAggregation::Sum, &embedder(), 3).unwrap();
        csr.qualifying_count = Some(17);
        let p = dir.path().join("csr.json");
        csr.save(&p).unwrap();
        assert_eq!(CsrSet::load(&p).unwrap(), csr);
    }

    #[test]
    fn seed_words_build_a_set() {
        let csr = CsrSet::from_seed_words(&[vec!["A".into()], vec!["b".into(), "c".into()]], &embedder()).unwrap();
        assert_eq!(csr.num_classes(), 2);
        assert_eq!(csr.classes[1].embedding, vec![0.5, 1.0]);
    }

    #[test]
    fn cosine_is_bounded() {
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-3.0, 0.0]) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
