mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use common::{Toy, TEXTS};
use pcm_core::csr::{
    build_csr, mine_attention_table, token_attention_received, update_csr, AttentionScoreTable, EncoderEmbedder,
    MiningConfig, MiningInput, MiningSentence, ScoreAggregation, WordSource, WordStats,
};
use pcm_core::encoder::EncoderOutput;
use pcm_core::{CsrSet, EncodedBatch, Precision, StopWords, TextTokenizer, TokenizedText, UpdateTrigger};

const WORD_TABLE: &str = "embeddings.word_embeddings.weight";

fn mine(toy: &Toy, input: MiningInput<'_>) -> AttentionScoreTable {
    let sentences: Vec<MiningSentence<'_>> = toy
        .texts
        .iter()
        .enumerate()
        .map(|(i, text)| MiningSentence {
            text,
            class: i % 4,
            source: WordSource::Labeled,
        })
        .collect();
    mine_attention_table(&toy.encoder, &sentences, 4, input, &toy.spec, &StopWords::default(), 4).unwrap()
}

/// Mean of the raw embedding-table rows of every piece of every word.
fn oracle_embedding(toy: &Toy, words: &[String]) -> Vec<f64> {
    let table = toy.encoder.store().get(WORD_TABLE).unwrap().to_dtype(DType::F64).unwrap();
    let table = table.to_vec2::<f64>().unwrap();
    let mut sum = vec![0.0; table[0].len()];
    let mut n = 0.0;
    for w in words {
        for id in toy.tokenizer.tokenize(w).unwrap().ids {
            for (s, v) in sum.iter_mut().zip(&table[id as usize]) {
                *s += v;
            }
            n += 1.0;
        }
    }
    sum.iter().map(|s| s / n).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_embeddings(toy: &Toy, csr: &CsrSet) {
    for class in &csr.classes {
        let words: Vec<String> = class.words.iter().map(|w| w.word.clone()).collect();
        let d = max_diff(&class.embedding, &oracle_embedding(toy, &words));
        assert!(d < 1e-6, "class {}: {d}", class.class_id);
    }
}

#[test]
fn mining_and_build_are_deterministic() {
    let toy = Toy::new(Precision::F32, 16, 5);
    let embedder = EncoderEmbedder {
        tokenizer: &toy.tokenizer,
        encoder: &toy.encoder,
    };
    let a = mine(&toy, MiningInput::Plain);
    let b = mine(&toy, MiningInput::Plain);
    assert_eq!(a, b);
    let ca = build_csr(&a, 3, ScoreAggregation::Sum, &embedder, 1).unwrap();
    let cb = build_csr(&b, 3, ScoreAggregation::Sum, &embedder, 1).unwrap();
    assert_eq!(ca, cb);
    for class in &ca.classes {
        assert!(!class.words.is_empty() && class.words.len() <= 3);
        for w in &class.words {
            assert!(!StopWords::default().is_filtered(&w.word), "{}", w.word);
        }
    }
}

#[test]
fn equal_scores_rank_lexicographically() {
    let toy = Toy::new(Precision::F32, 16, 5);
    let embedder = EncoderEmbedder {
        tokenizer: &toy.tokenizer,
        encoder: &toy.encoder,
    };
    let mut table = AttentionScoreTable::new(1);
    for w in ["treaty", "league", "galaxy", "election"] {
        table.classes[0].insert(
            w.into(),
            WordStats {
                score: 0.5,
                count: 1,
                labeled_count: 1,
            },
        );
    }
    let csr = build_csr(&table, 2, ScoreAggregation::Sum, &embedder, 0).unwrap();
    let words: Vec<&str> = csr.classes[0].words.iter().map(|w| w.word.as_str()).collect();
    assert_eq!(words, vec!["election", "galaxy"]);
}

#[test]
fn embeddings_track_encoder_weights() {
    let toy = Toy::new(Precision::F32, 16, 5);
    let table = mine(&toy, MiningInput::Plain);
    let build = |toy: &Toy| {
        let embedder = EncoderEmbedder {
            tokenizer: &toy.tokenizer,
            encoder: &toy.encoder,
        };
        build_csr(&table, 4, ScoreAggregation::Sum, &embedder, 1).unwrap()
    };
    let before = build(&toy);
    check_embeddings(&toy, &before);

    // Move the embedding table as training would, then rebuild.
    let var = toy.encoder.store().var(WORD_TABLE).unwrap();
    let shifted = (var.as_tensor() * 1.5).unwrap().affine(1.0, 0.25).unwrap();
    var.set(&shifted).unwrap();
    let after = build(&toy);
    check_embeddings(&toy, &after);
    assert!(max_diff(&before.classes[0].embedding, &after.classes[0].embedding) > 0.1);
}

#[test]
fn update_recomputes_from_current_encoder() {
    let toy = Toy::new(Precision::F32, 16, 5);
    let seed = toy.csr();
    check_embeddings(&toy, &seed);
    let labeled: Vec<(&TokenizedText, usize)> = toy.texts.iter().take(4).zip(0..).collect();
    let qualifying: Vec<(&TokenizedText, usize)> = toy.texts.iter().skip(4).zip([1, 3]).collect();
    let mining = MiningConfig {
        top_j: 5,
        ..MiningConfig::default()
    };
    let run = || {
        update_csr(
            &seed,
            &labeled,
            &qualifying,
            &toy.encoder,
            &toy.tokenizer,
            &toy.spec,
            &StopWords::default(),
            &mining,
        )
        .unwrap()
    };
    let next = run();
    assert_eq!(next, run());
    assert_eq!(next.version, seed.version + 1);
    assert_eq!(next.num_classes(), 4);
    check_embeddings(&toy, &next);
    // Class 1 saw "a striker for the league" and "minister of the embassy".
    let words: Vec<&str> = next.classes[1].words.iter().map(|w| w.word.as_str()).collect();
    for w in ["striker", "league", "minister", "embassy"] {
        assert!(words.contains(&w), "{words:?}");
    }
    assert_eq!(next.classes[1].words.iter().filter(|w| w.source == WordSource::Unlabeled).count(), 2);
}

#[test]
fn trigger_follows_scripted_counts() {
    let counts = [0, 3, 3, 2, 5, 5, 9, 1, 9, 10];
    let want = [false, true, false, false, true, false, true, false, false, true];
    let mut trig = UpdateTrigger::default();
    let fired: Vec<bool> = counts.iter().map(|&c| trig.check(c)).collect();
    assert_eq!(fired, want);
    assert_eq!(trig.running_max, 10);
}

fn single_row(seq: usize) -> EncodedBatch {
    EncodedBatch {
        rows: 1,
        seq_len: seq,
        token_ids: vec![0; seq],
        attention_mask: vec![1; seq],
        segment_ids: vec![0; seq],
        position_ids: (0..seq as u32).collect(),
        text_spans: vec![0..seq],
        csr_slots: vec![vec![]],
        class_word_spans: vec![vec![]],
        texts: vec![TokenizedText::empty()],
        empty_text: vec![false],
        csr_version: None,
    }
}

#[test]
fn received_attention_hand_built() {
    let att = Tensor::new(&[[[[0.9f64, 0.1], [0.6, 0.4]]]], &Device::Cpu).unwrap();
    let out = EncoderOutput {
        features: att.clone(),
        attention: att,
    };
    let r = token_attention_received(&out, &single_row(2)).unwrap();
    assert!((r[0][0] - 0.75).abs() < 1e-12 && (r[0][1] - 0.25).abs() < 1e-12, "{r:?}");

    for l in [1usize, 3, 7] {
        let att = Tensor::full(1.0 / l as f64, (1, 2, l, l), &Device::Cpu).unwrap();
        let out = EncoderOutput {
            features: att.clone(),
            attention: att,
        };
        for v in &token_attention_received(&out, &single_row(l)).unwrap()[0] {
            assert!((v - 1.0 / l as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn received_attention_of_real_encoder_is_a_distribution() {
    let toy = Toy::new(Precision::F32, 16, 5);
    let refs = toy.refs();
    let batch = EncodedBatch::plain(&refs, &toy.spec);
    let out = toy.encoder.forward(&batch, None, None).unwrap();
    let r = token_attention_received(&out, &batch).unwrap();
    for (row, scores) in r.iter().enumerate() {
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        for (t, &s) in scores.iter().enumerate() {
            if batch.row_mask(row)[t] == 0 {
                assert_eq!(s, 0.0);
            } else {
                assert!(s > 0.0);
            }
        }
    }
    assert_eq!(TEXTS.len(), r.len());
}

proptest! {
    #[test]
    fn build_keeps_the_best_top_j(scores in prop::collection::vec(0u8..6, 4..12), top_j in 1usize..6) {
        let toy = Toy::new(Precision::F32, 16, 5);
        let vocab = ["election", "treaty", "striker", "league", "shares", "profit",
                     "telescope", "galaxy", "minister", "embassy", "coach", "playoffs"];
        let mut table = AttentionScoreTable::new(1);
        for (w, &s) in vocab.iter().zip(&scores) {
            table.classes[0].insert((*w).into(), WordStats { score: s as f64, count: 1, labeled_count: 0 });
        }
        let embedder = EncoderEmbedder { tokenizer: &toy.tokenizer, encoder: &toy.encoder };
        let csr = build_csr(&table, top_j, ScoreAggregation::Sum, &embedder, 0).unwrap();
        let kept = &csr.classes[0].words;
        prop_assert_eq!(kept.len(), top_j.min(scores.len()));
        let floor = kept.last().unwrap().score;
        for pair in kept.windows(2) {
            prop_assert!(pair[0].score > pair[1].score
                || (pair[0].score == pair[1].score && pair[0].word < pair[1].word));
        }
        for (w, &s) in vocab.iter().zip(&scores) {
            if !kept.iter().any(|k| k.word == *w) {
                prop_assert!(s as f64 <= floor);
            }
        }
    }
}
