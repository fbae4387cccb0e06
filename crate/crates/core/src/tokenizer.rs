//! Text → subword ids with word alignment.
//!
//! Every tokenizer reports, for each subword piece, the index of the
//! whitespace/punctuation-delimited word it came from. Attention mining works
//! at the word level, so this alignment is part of the contract.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// A tokenized sentence: subword ids plus the word each piece belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    /// `word_of[i]` indexes into `words` for piece `i`.
    pub word_of: Vec<usize>,
    /// Lowercased surface form of each word.
    pub words: Vec<String>,
}

impl TokenizedText {
    pub fn empty() -> Self {
        Self {
            ids: Vec::new(),
            word_of: Vec::new(),
            words: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps the pieces in `range`. Words that lose all of their pieces are
    /// dropped and the remaining word indices are renumbered.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let ids = self.ids[range.clone()].to_vec();
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut words = Vec::new();
        let word_of = self.word_of[range]
            .iter()
            .map(|&w| {
                *remap.entry(w).or_insert_with(|| {
                    words.push(self.words[w].clone());
                    words.len() - 1
                })
            })
            .collect();
        Self {
            ids,
            word_of,
            words,
        }
    }
}

/// Ids of the special tokens used to lay out encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
}

pub trait TextTokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Result<TokenizedText>;
    fn specials(&self) -> SpecialTokens;
    fn vocab_size(&self) -> usize;
    fn id_to_token(&self, id: u32) -> Option<String>;
}

/// Lowercases and splits on whitespace, emitting each punctuation character
/// as its own word. Mirrors BERT's basic (pre-WordPiece) tokenization.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                words.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Whole-word vocabulary tokenizer for randomly initialized encoders.
///
/// One word maps to exactly one id; out-of-vocabulary words map to `[UNK]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    const RESERVED: [&'static str; 5] = [PAD, UNK, CLS, SEP, MASK];

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in Self::RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Tokenizer(format!(
                    "vocabulary must start with {:?}",
                    Self::RESERVED
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from every word occurring at least `min_count`
    /// times, ordered by descending frequency then lexicographically.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in split_words(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !Self::RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = Self::RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens are prepended")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(1)
    }
}

impl TextTokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Result<TokenizedText> {
        let words = split_words(text);
        let ids = words.iter().map(|w| self.id(w)).collect();
        let word_of = (0..words.len()).collect();
        Ok(TokenizedText {
            ids,
            word_of,
            words,
        })
    }

    fn specials(&self) -> SpecialTokens {
        SpecialTokens {
            pad: self.id(PAD),
            unk: self.id(UNK),
            cls: self.id(CLS),
            sep: self.id(SEP),
        }
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        self.tokens.get(id as usize).cloned()
    }
}

/// WordPiece tokenizer of a pretrained checkpoint, backed by `tokenizers`.
pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    specials: SpecialTokens,
}

impl HfTokenizer {
    /// Loads `tokenizer.json` if present, otherwise builds an uncased BERT
    /// WordPiece tokenizer from `vocab.txt`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let json = dir.join("tokenizer.json");
        let inner = if json.exists() {
            tokenizers::Tokenizer::from_file(&json)
                .map_err(|e| Error::Tokenizer(format!("{}: {e}", json.display())))?
        } else {
            let vocab = dir.join("vocab.txt");
            let model = tokenizers::models::wordpiece::WordPiece::from_file(
                vocab.to_str().unwrap_or_default(),
            )
            .unk_token(UNK.to_string())
            .build()
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", vocab.display())))?;
            let mut tok = tokenizers::Tokenizer::new(model);
            tok.with_normalizer(Some(
                tokenizers::normalizers::bert::BertNormalizer::default(),
            ))
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
            tok.with_pre_tokenizer(Some(tokenizers::pre_tokenizers::bert::BertPreTokenizer));
            tok
        };
        let id = |t: &str| {
            inner
                .token_to_id(t)
                .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks {t}")))
        };
        let specials = SpecialTokens {
            pad: id(PAD)?,
            unk: id(UNK)?,
            cls: id(CLS)?,
            sep: id(SEP)?,
        };
        Ok(Self { inner, specials })
    }
}

impl TextTokenizer for HfTokenizer {
    fn tokenize(&self, text: &str) -> Result<TokenizedText> {
        let enc = self
            .inner
            .encode(text, false)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        let mut words: Vec<String> = Vec::new();
        let mut spans: Vec<(usize, usize)> = Vec::new();
        let mut word_of = Vec::with_capacity(enc.len());
        let mut last: Option<u32> = None;
        for (&word, &(start, end)) in enc.get_word_ids().iter().zip(enc.get_offsets()) {
            // Pieces without a word id (should not occur without specials)
            // become their own word.
            if word.is_none() || word != last {
                spans.push((start, end));
                words.push(String::new());
            } else if let Some(span) = spans.last_mut() {
                span.1 = end;
            }
            last = word;
            word_of.push(words.len() - 1);
        }
        for (word, &(start, end)) in words.iter_mut().zip(&spans) {
            *word = text.get(start..end).unwrap_or_default().to_lowercase();
        }
        Ok(TokenizedText {
            ids: enc.get_ids().to_vec(),
            word_of,
            words,
        })
    }

    fn specials(&self) -> SpecialTokens {
        self.specials
    }

    fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        self.inner.id_to_token(id)
    }
}
