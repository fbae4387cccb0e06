//! Synthetic keyword-planted topic corpus for desk-scale runs.
//!
//! Each sentence mixes a few keywords of its class (and sometimes one of
//! another class) into filler text. A handful of labeled sentences covers
//! only part of each class's vocabulary, so generalizing to the rest has to
//! come from co-occurrence in unlabeled text.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};

pub const FIXTURE_CORPUS: &str = "fixture";

pub const CLASS_NAMES: [&str; 4] = ["world", "sports", "business", "science"];

const KEYWORDS: [&[&str]; 4] = [
    &[
        "election", "minister", "parliament", "embassy", "treaty", "rebels", "ceasefire", "diplomat",
        "president", "refugees", "sanctions", "troops", "protest", "border", "summit", "militants",
        "ambassador", "coalition", "referendum", "insurgents", "cabinet", "envoy", "regime", "hostages",
        "uprising", "junta", "bombing", "governor", "asylum", "peacekeepers",
    ],
    &[
        "football", "coach", "striker", "tournament", "playoffs", "quarterback", "goalkeeper", "league",
        "championship", "midfielder", "stadium", "referee", "inning", "pitcher", "olympics", "medal",
        "sprinter", "tennis", "golfer", "rugby", "defender", "halftime", "touchdown", "wicket", "racing",
        "marathon", "semifinal", "draft", "homer", "boxing",
    ],
    &[
        "shares", "profit", "revenue", "investors", "merger", "earnings", "stocks", "dividend",
        "quarterly", "acquisition", "retailer", "bankruptcy", "nasdaq", "shareholders", "inflation",
        "tariffs", "exports", "bonds", "lender", "startup", "valuation", "layoffs", "supplier", "margins",
        "forecast", "brokerage", "mortgage", "ipo", "conglomerate", "currency",
    ],
    &[
        "telescope", "genome", "researchers", "molecule", "satellite", "physics", "laboratory", "species",
        "astronomers", "vaccine", "protein", "quantum", "fossil", "orbit", "algorithm", "neurons",
        "climate", "bacteria", "software", "chemistry", "galaxy", "enzyme", "robotics", "spacecraft",
        "microscope", "mutation", "experiment", "asteroid", "semiconductor", "dna",
    ],
];

/// Background words. All are on the bundled stop-word list, so attention
/// mining sees only planted keywords.
const FILLER: &[&str] = &[
    "the", "a", "of", "to", "and", "in", "on", "for", "with", "that", "this", "was", "is", "were", "by",
    "after", "before", "about", "from", "at", "other", "more", "some", "while", "during", "it", "its",
    "their", "they", "has", "had", "have", "been", "be", "an", "as", "but", "into", "over", "than",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    /// Chance of planting one keyword of a different class.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            keywords_per_class: 10,
            train_rows: 600,
            test_rows: 200,
            min_words: 6,
            max_words: 10,
            min_keywords: 2,
            max_keywords: 3,
            distractor_prob: 0.2,
            seed: 7,
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > KEYWORDS.len() {
            return Err(Error::Config(format!("fixture supports 2..={} classes", KEYWORDS.len())));
        }
        if self.keywords_per_class == 0 || self.keywords_per_class > KEYWORDS[0].len() {
            return Err(Error::Config(format!(
                "fixture keywords per class must be in 1..={}",
                KEYWORDS[0].len()
            )));
        }
        if self.min_keywords == 0 || self.min_keywords > self.max_keywords || self.min_words > self.max_words {
            return Err(Error::Config("fixture ranges are inverted or empty".into()));
        }
        if self.max_keywords + 1 > self.min_words {
            return Err(Error::Config("fixture sentences are too short for their keywords".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor probability outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn keywords(&self, class: usize) -> &'static [&'static str] {
        &KEYWORDS[class][..self.keywords_per_class]
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }

    fn sentence(&self, class: usize, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(self.min_words..=self.max_words);
        let planted = rng.gen_range(self.min_keywords..=self.max_keywords);
        let mut words: Vec<&str> = self.keywords(class).choose_multiple(rng, planted).copied().collect();
        if rng.gen::<f64>() < self.distractor_prob {
            let other = (class + rng.gen_range(1..self.num_classes)) % self.num_classes;
            words.push(self.keywords(other).choose(rng).copied().unwrap_or_default());
        }
        while words.len() < len {
            words.push(FILLER.choose(rng).copied().unwrap_or_default());
        }
        words.shuffle(rng);
        words.join(" ")
    }

    fn corpus(&self, rows: usize, split: Split, rng: &mut ChaCha8Rng) -> Result<Corpus> {
        let labels: Vec<usize> = (0..rows).map(|i| i % self.num_classes).collect();
        let texts = labels.iter().map(|&c| self.sentence(c, rng)).collect();
        Corpus::new(FIXTURE_CORPUS, self.num_classes, texts, Some(labels), split)
    }

    /// Training pool and test set, deterministic in the config.
    pub fn generate(&self) -> Result<(Corpus, Corpus)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let train = self.corpus(self.train_rows, Split::TrainLabeled, &mut rng)?;
        let test = self.corpus(self.test_rows, Split::Test, &mut rng)?;
        Ok((train, test))
    }

    /// Writes `train.csv` and `test.csv` with `text,label` headers.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let (train, test) = self.generate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (corpus, name) in [(&train, "train.csv"), (&test, "test.csv")] {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(["text", "label"])?;
            let labels = corpus.labels.as_deref().unwrap_or_default();
            for (t, y) in corpus.texts.iter().zip(labels) {
                w.write_record([t.as_str(), &y.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(dir.join(name), e))?;
        }
        Ok(())
    }
}

/// Two bundled sentences with their classes, for the inherent-matching
/// probe.
pub fn probe_examples() -> Vec<(String, usize)> {
    include_str!("../assets/probe_examples.tsv")
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let (label, text) = l.split_once('\t')?;
            Some((text.trim().to_string(), label.trim().parse().ok()?))
        })
        .collect()
}

/// Class words matching [`probe_examples`] labels.
pub const PROBE_CLASS_WORDS: [&str; 4] = ["politics", "sports", "business", "science"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = FixtureConfig::default();
        let (a, t) = cfg.generate().unwrap();
        let (b, _) = cfg.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(t.len(), 200);
        let labels = a.labels.unwrap();
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), 150);
        }
    }

    #[test]
    fn sentences_carry_class_keywords() {
        let cfg = FixtureConfig::default();
        let (train, _) = cfg.generate().unwrap();
        let labels = train.labels.as_ref().unwrap();
        for (text, &y) in train.texts.iter().zip(labels).take(50) {
            let words: Vec<&str> = text.split(' ').collect();
            assert!((cfg.min_words..=cfg.max_words).contains(&words.len()));
            let own = words.iter().filter(|w| cfg.keywords(y).contains(w)).count();
            assert!(own >= 2, "{text}");
        }
    }

    #[test]
    fn keyword_lists_are_disjoint_from_filler() {
        let all: Vec<&str> = KEYWORDS.iter().flat_map(|k| k.iter().copied()).collect();
        let unique: std::collections::HashSet<&str> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len());
        assert!(all.iter().all(|k| !FILLER.contains(k)));
    }

    #[test]
    fn only_keywords_survive_stop_words() {
        let sw = crate::csr::StopWords::default();
        for w in FILLER {
            assert!(sw.is_filtered(w), "{w}");
        }
        for w in KEYWORDS.iter().flat_map(|k| k.iter()) {
            assert!(!sw.is_filtered(w), "{w}");
        }
    }

    #[test]
    fn bundled_probe_examples() {
        let ex = probe_examples();
        assert_eq!(ex.len(), 2);
        assert!(ex.iter().all(|(_, y)| *y < PROBE_CLASS_WORDS.len()));
    }
}
