use std::ops::Range;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{truncate, Truncation};
use crate::error::Result;
use crate::tokenizer::{SpecialTokens, TokenizedText};

/// Which part of a text survives when it exceeds the token budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutSpec {
    pub max_len: usize,
    pub truncation: Truncation,
    pub specials: SpecialTokens,
}

/// Token ids and position bookkeeping for
/// `[CLS] text [SEP]` or `[CLS] text [SEP] second-segment [SEP]` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedBatch {
    pub rows: usize,
    pub seq_len: usize,
    /// Row-major `[rows, seq_len]`.
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u32>,
    /// Position ids. All CSR slots of a row share one position so that no
    /// class is distinguished by where its slot sits.
    pub position_ids: Vec<u32>,
    /// Sentence-token positions, excluding specials.
    pub text_spans: Vec<Range<usize>>,
    /// `K` positions per row that receive CSR embeddings; empty for plain rows.
    pub csr_slots: Vec<Vec<usize>>,
    /// Literal class-word pieces per row (probe layout only).
    pub class_word_spans: Vec<Vec<Range<usize>>>,
    /// The (possibly truncated) text laid out in each row.
    pub texts: Vec<TokenizedText>,
    pub empty_text: Vec<bool>,
    pub csr_version: Option<u64>,
}

enum Second<'a> {
    None,
    Slots(usize),
    Words(&'a [TokenizedText]),
}

impl<'a> Second<'a> {
    fn len(&self) -> usize {
        match self {
            Second::None => 0,
            Second::Slots(k) => *k,
            Second::Words(words) => words.iter().map(TokenizedText::len).sum(),
        }
    }

    fn overhead(&self) -> usize {
        match self {
            Second::None => 2,
            _ => 3 + self.len(),
        }
    }
}

impl EncodedBatch {
    /// `[CLS] text [SEP]`, the baseline input format.
    pub fn plain(texts: &[&TokenizedText], spec: &LayoutSpec) -> Self {
        Self::build(texts, Second::None, None, spec)
    }

    /// `[CLS] text [SEP] slot_1 .. slot_K [SEP]`. Slot ids are `[PAD]`; the
    /// encoder substitutes CSR embeddings at those positions.
    pub fn with_csr_slots(
        texts: &[&TokenizedText],
        k: usize,
        csr_version: u64,
        spec: &LayoutSpec,
    ) -> Self {
        Self::build(texts, Second::Slots(k), Some(csr_version), spec)
    }

    /// `[CLS] text [SEP] w_1 .. w_K [SEP]` with the literal pieces of one
    /// word (or phrase) per class.
    pub fn with_class_words(
        texts: &[&TokenizedText],
        class_words: &[TokenizedText],
        spec: &LayoutSpec,
    ) -> Self {
        Self::build(texts, Second::Words(class_words), None, spec)
    }

    fn build(
        texts: &[&TokenizedText],
        second: Second<'_>,
        csr_version: Option<u64>,
        spec: &LayoutSpec,
    ) -> Self {
        let budget = spec.max_len.saturating_sub(second.overhead());
        let kept: Vec<TokenizedText> = texts
            .iter()
            .map(|t| truncate(t, budget, spec.truncation))
            .collect();
        let seq_len = kept
            .iter()
            .map(|t| t.len() + second.overhead())
            .max()
            .unwrap_or(0);
        let rows = kept.len();
        let sp = spec.specials;
        let mut batch = EncodedBatch {
            rows,
            seq_len,
            token_ids: vec![sp.pad; rows * seq_len],
            attention_mask: vec![0; rows * seq_len],
            segment_ids: vec![0; rows * seq_len],
            position_ids: (0..rows).flat_map(|_| 0..seq_len as u32).collect(),
            text_spans: Vec::with_capacity(rows),
            csr_slots: Vec::with_capacity(rows),
            class_word_spans: Vec::with_capacity(rows),
            empty_text: kept.iter().map(TokenizedText::is_empty).collect(),
            texts: Vec::new(),
            csr_version,
        };
        for (r, text) in kept.iter().enumerate() {
            let base = r * seq_len;
            let mut row = Vec::with_capacity(seq_len);
            let mut segments = Vec::with_capacity(seq_len);
            row.push(sp.cls);
            row.extend_from_slice(&text.ids);
            row.push(sp.sep);
            segments.resize(row.len(), 0);
            batch.text_spans.push(1..1 + text.len());
            let mut slots = Vec::new();
            let mut spans = Vec::new();
            match &second {
                Second::None => {}
                Second::Slots(k) => {
                    for _ in 0..*k {
                        slots.push(row.len());
                        row.push(sp.pad);
                    }
                }
                Second::Words(words) => {
                    for w in words.iter() {
                        let start = row.len();
                        row.extend_from_slice(&w.ids);
                        spans.push(start..row.len());
                    }
                }
            }
            if !matches!(second, Second::None) {
                row.push(sp.sep);
            }
            segments.resize(row.len(), 1);
            for (i, (&id, &seg)) in row.iter().zip(&segments).enumerate() {
                batch.token_ids[base + i] = id;
                batch.segment_ids[base + i] = seg;
                batch.position_ids[base + i] = match slots.first() {
                    Some(&first) if i > first => (i - (i - first).min(slots.len() - 1)) as u32,
                    _ => i as u32,
                };
                batch.attention_mask[base + i] = 1;
            }
            batch.csr_slots.push(slots);
            batch.class_word_spans.push(spans);
        }
        batch.texts = kept;
        batch
    }

    /// Extends every row with padding up to `len` positions.
    pub fn pad_to(&self, len: usize, pad: u32) -> Self {
        if len <= self.seq_len {
            return self.clone();
        }
        let mut out = self.clone();
        out.seq_len = len;
        out.token_ids = vec![pad; self.rows * len];
        out.attention_mask = vec![0; self.rows * len];
        out.segment_ids = vec![0; self.rows * len];
        out.position_ids = (0..self.rows).flat_map(|_| 0..len as u32).collect();
        for r in 0..self.rows {
            let src = r * self.seq_len..(r + 1) * self.seq_len;
            let dst = r * len..r * len + self.seq_len;
            out.token_ids[dst.clone()].copy_from_slice(&self.token_ids[src.clone()]);
            out.attention_mask[dst.clone()].copy_from_slice(&self.attention_mask[src.clone()]);
            out.segment_ids[dst.clone()].copy_from_slice(&self.segment_ids[src.clone()]);
            out.position_ids[dst].copy_from_slice(&self.position_ids[src]);
        }
        out
    }

    pub fn num_slots(&self) -> usize {
        self.csr_slots.first().map_or(0, Vec::len)
    }

    pub fn row_mask(&self, row: usize) -> &[u8] {
        &self.attention_mask[row * self.seq_len..(row + 1) * self.seq_len]
    }

    pub fn row_ids(&self, row: usize) -> &[u32] {
        &self.token_ids[row * self.seq_len..(row + 1) * self.seq_len]
    }

    /// `[rows, seq_len]` tensor with `1/len` over each row's text span.
    pub fn text_pooling_weights(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut w = vec![0f64; self.rows * self.seq_len];
        for (r, span) in self.text_spans.iter().enumerate() {
            if span.is_empty() {
                continue;
            }
            let v = 1.0 / span.len() as f64;
            for p in span.clone() {
                w[r * self.seq_len + p] = v;
            }
        }
        Ok(Tensor::from_vec(w, (self.rows, self.seq_len), device)?.to_dtype(dtype)?)
    }

    /// `[rows, K, seq_len]` one-hot selector of CSR slot positions.
    pub fn slot_selector(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let k = self.num_slots();
        let mut w = vec![0f64; self.rows * k * self.seq_len];
        for (r, slots) in self.csr_slots.iter().enumerate() {
            for (c, &p) in slots.iter().enumerate() {
                w[(r * k + c) * self.seq_len + p] = 1.0;
            }
        }
        Ok(Tensor::from_vec(w, (self.rows, k, self.seq_len), device)?.to_dtype(dtype)?)
    }

    /// Keeps only the listed rows, preserving their order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = EncodedBatch {
            rows: rows.len(),
            seq_len: self.seq_len,
            token_ids: Vec::with_capacity(rows.len() * self.seq_len),
            attention_mask: Vec::with_capacity(rows.len() * self.seq_len),
            segment_ids: Vec::with_capacity(rows.len() * self.seq_len),
            position_ids: Vec::with_capacity(rows.len() * self.seq_len),
            text_spans: Vec::with_capacity(rows.len()),
            csr_slots: Vec::with_capacity(rows.len()),
            class_word_spans: Vec::with_capacity(rows.len()),
            texts: Vec::with_capacity(rows.len()),
            empty_text: Vec::with_capacity(rows.len()),
            csr_version: self.csr_version,
        };
        for &r in rows {
            let range = r * self.seq_len..(r + 1) * self.seq_len;
            out.token_ids.extend_from_slice(&self.token_ids[range.clone()]);
            out.attention_mask
                .extend_from_slice(&self.attention_mask[range.clone()]);
            out.segment_ids.extend_from_slice(&self.segment_ids[range.clone()]);
            out.position_ids.extend_from_slice(&self.position_ids[range]);
            out.text_spans.push(self.text_spans[r].clone());
            out.csr_slots.push(self.csr_slots[r].clone());
            out.class_word_spans.push(self.class_word_spans[r].clone());
            out.texts.push(self.texts[r].clone());
            out.empty_text.push(self.empty_text[r]);
        }
        out
    }
}
