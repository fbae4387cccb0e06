use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, Method};
use super::metrics;
use crate::csr::{CsrSet, EncoderEmbedder, StopWords};
use crate::data::{
    fallback_augment, load_augmentations, load_corpus, subsample_labels, truncation_for, Corpus, Split,
    SplitManifest,
};
use crate::encoder::{Backbone, LayoutSpec};
use crate::error::{Error, Result};
use crate::model::PcmModel;
use crate::ssl::{initialize_csr, CheckRecord, EvalPoint, LogRecord, TrainData, Trainer};
use crate::tokenizer::TokenizedText;

/// Outcome of one label-set seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub completed: bool,
    pub error: Option<String>,
    pub steps: usize,
    pub best: Option<EvalPoint>,
    pub last: Option<EvalPoint>,
    pub initial_csr: Option<CsrSet>,
    pub final_csr: Option<CsrSet>,
    /// Versions of every CSR that was active, in order.
    pub csr_versions: Vec<u64>,
    pub checks: Vec<CheckRecord>,
    pub manifest: Option<SplitManifest>,
    pub log_path: Option<PathBuf>,
    #[serde(skip)]
    pub log: Vec<LogRecord>,
}

impl SeedRun {
    fn failed(seed: u64, err: &Error) -> Self {
        Self {
            seed,
            completed: false,
            error: Some(err.to_string()),
            steps: 0,
            best: None,
            last: None,
            initial_csr: None,
            final_csr: None,
            csr_versions: Vec::new(),
            checks: Vec::new(),
            manifest: None,
            log_path: None,
            log: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_seed: Vec<f64>,
    pub mean: Option<f64>,
    /// Standard error of the mean; needs at least two seeds.
    pub sem: Option<f64>,
}

impl AccuracySummary {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        Self {
            mean: metrics::mean(&per_seed),
            sem: metrics::sem(&per_seed),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub corpus: String,
    pub n_per_class: usize,
    pub unlabeled_cap: Option<usize>,
    pub config_hash: String,
    pub parity_hash: String,
    pub config: ExperimentConfig,
    /// False when any seed failed; summaries then cover completed seeds.
    pub complete: bool,
    /// Test accuracy at the check with the most validation sentences passing
    /// the gate.
    pub best: AccuracySummary,
    /// Test accuracy after the final step.
    pub last: AccuracySummary,
    pub seeds: Vec<SeedRun>,
}

impl RunResult {
    /// Headline accuracy (checkpoint chosen by validation gate count).
    pub fn accuracy(&self) -> Option<f64> {
        self.best.mean
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn run_name(&self) -> String {
        run_name(&self.config)
    }
}

pub fn run_name(config: &ExperimentConfig) -> String {
    let mut name = format!("{}-n{}", config.method, config.n_per_class);
    if let Some(cap) = config.unlabeled_cap {
        name.push_str(&format!("-u{cap}"));
    }
    name
}

/// Corpora, augmentations and backbone shared by every run that differs
/// only in method, label count, pool size or seeds.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Corpus,
    pub test: Corpus,
    augmented: Vec<String>,
    pub backbone: Backbone,
    pub spec: LayoutSpec,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test, augmented) = match &config.data {
            DataSource::Fixture(f) => {
                let (train, test) = f.generate()?;
                (train, test, None)
            }
            DataSource::Files {
                train,
                test,
                augmentations,
                delimiter,
            } => {
                let d = u8::try_from(*delimiter)
                    .map_err(|_| Error::Config(format!("delimiter {delimiter:?} is not a single byte")))?;
                let tr = load_corpus(train, &config.corpus, Split::TrainLabeled, None, d)?;
                let te = load_corpus(test, &config.corpus, Split::Test, Some(tr.num_classes), d)?;
                let aug = augmentations
                    .as_ref()
                    .map(|p| load_augmentations(p, &tr.texts))
                    .transpose()?
                    .map(|pairs| pairs.into_iter().map(|p| p.augmented).collect());
                (tr, te, aug)
            }
        };
        let augmented = match augmented {
            Some(a) => a,
            None => train
                .texts
                .iter()
                .enumerate()
                .map(|(i, t)| Ok(fallback_augment(t, i as u64, config.augment)?.augmented))
                .collect::<Result<Vec<_>>>()?,
        };
        let vocab_texts = train.texts.iter().chain(&test.texts).chain(&augmented).map(String::as_str);
        let backbone = Backbone::load(&config.encoder, config.precision, vocab_texts)?;
        if config.max_len > backbone.encoder.config().max_positions {
            return Err(Error::Config(format!(
                "max_len {} exceeds the encoder's {} positions",
                config.max_len,
                backbone.encoder.config().max_positions
            )));
        }
        let spec = LayoutSpec {
            max_len: config.max_len,
            truncation: truncation_for(&config.corpus),
            specials: backbone.tokenizer.specials(),
        };
        Ok(Self {
            config,
            train,
            test,
            augmented,
            backbone,
            spec,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    fn check_compatible(&self, config: &ExperimentConfig) -> Result<()> {
        if config.data != self.config.data
            || config.encoder != self.config.encoder
            || config.precision != self.config.precision
            || config.max_len != self.config.max_len
            || config.corpus != self.config.corpus
        {
            return Err(Error::Config(
                "configuration needs different data or encoder than the prepared experiment".into(),
            ));
        }
        let labels = self.train.labels.as_deref().unwrap_or_default();
        for class in 0..self.num_classes() {
            let have = labels.iter().filter(|&&y| y == class).count();
            if have < config.n_per_class {
                return Err(Error::Config(format!(
                    "{} labels per class requested but class {class} has only {have} training rows",
                    config.n_per_class
                )));
            }
        }
        Ok(())
    }

    fn tokenize(&self, text: &str) -> Result<TokenizedText> {
        self.backbone.tokenizer.tokenize(text)
    }

    /// Tokenized labeled, unlabeled, validation and test sets for one seed.
    pub fn train_data(&self, config: &ExperimentConfig, seed: u64) -> Result<(TrainData, SplitManifest)> {
        let manifest = subsample_labels(
            &self.train,
            config.n_per_class,
            seed,
            config.validation_fraction,
            config.unlabeled_cap,
        )?;
        let labeled = manifest
            .labeled_rows()
            .into_iter()
            .map(|(r, y)| Ok((self.tokenize(&self.train.texts[r])?, y)))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = manifest
            .unlabeled
            .iter()
            .map(|&r| Ok((self.tokenize(&self.train.texts[r])?, self.tokenize(&self.augmented[r])?)))
            .collect::<Result<Vec<_>>>()?;
        let validation = manifest
            .validation
            .iter()
            .map(|&r| self.tokenize(&self.train.texts[r]))
            .collect::<Result<Vec<_>>>()?;
        let test_labels = self.test.labels.as_deref().unwrap_or_default();
        let n_test = config.test_cap.map_or(self.test.len(), |c| c.min(self.test.len()));
        let test = (0..n_test)
            .map(|i| Ok((self.tokenize(&self.test.texts[i])?, test_labels[i])))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            TrainData {
                labeled,
                unlabeled,
                validation,
                test,
            },
            manifest,
        ))
    }

    /// Initial CSRs for a seed: mined after a supervised fine-tune, or
    /// built from configured seed words.
    pub fn initial_csr(&self, config: &ExperimentConfig, data: &TrainData, seed: u64) -> Result<CsrSet> {
        let encoder = &self.backbone.encoder;
        let tokenizer = self.backbone.tokenizer.as_ref();
        if let Some(words) = &config.seed_words {
            if words.len() != self.num_classes() {
                return Err(Error::Config(format!(
                    "{} seed-word lists for {} classes",
                    words.len(),
                    self.num_classes()
                )));
            }
            return CsrSet::from_seed_words(words, &EncoderEmbedder { tokenizer, encoder });
        }
        initialize_csr(
            encoder,
            tokenizer,
            &data.labeled,
            self.num_classes(),
            &self.spec,
            &config.train_config(seed),
            config.head,
            config.init_epochs,
            &StopWords::default(),
        )
    }

    pub fn run_seed(&self, config: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<SeedRun> {
        self.check_compatible(config)?;
        let spec = config.method.spec();
        let (data, manifest) = self.train_data(config, seed)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            manifest.save(&dir.join("manifest.json"))?;
        }
        let csr = if spec.layout.uses_csr() {
            Some(self.initial_csr(config, &data, seed)?)
        } else {
            None
        };
        let model = PcmModel::new(
            self.backbone.encoder.deep_clone()?,
            self.num_classes(),
            spec.layout,
            config.head,
            seed,
        )?;
        let mut trainer = Trainer::new(
            config.train_config(seed),
            model,
            csr.clone(),
            &data,
            self.spec,
            self.backbone.tokenizer.as_ref(),
        )?;
        if let Some(dir) = out_dir {
            trainer = trainer.with_output_dir(dir)?;
        }
        let outcome = trainer.run()?;
        let checks = outcome.checks().cloned().collect();
        Ok(SeedRun {
            seed,
            completed: true,
            error: None,
            steps: outcome.steps,
            best: outcome.best,
            last: outcome.last,
            initial_csr: csr,
            final_csr: outcome.csr.clone(),
            csr_versions: outcome.csr_history.iter().map(|c| c.version).collect(),
            checks,
            manifest: Some(manifest),
            log_path: out_dir.map(|d| d.join("train_log.jsonl")),
            log: outcome.log,
        })
    }

    /// Runs every seed of `config`; seed failures are recorded, not raised.
    pub fn run(&self, config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunResult> {
        self.check_compatible(config)?;
        let run_dir = out_dir.map(|d| d.join(run_name(config)));
        let mut seeds = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let dir = run_dir.as_ref().map(|d| d.join(format!("seed-{seed}")));
            let run = match self.run_seed(config, seed, dir.as_deref()) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", config.method);
                    SeedRun::failed(seed, &e)
                }
            };
            if let Some(b) = run.best {
                log::info!("{} seed {seed}: best {:.2} at step {}", config.method, b.accuracy, b.step);
            }
            seeds.push(run);
        }
        let pick = |f: fn(&SeedRun) -> Option<EvalPoint>| {
            AccuracySummary::from_values(seeds.iter().filter_map(|s| f(s).map(|p| p.accuracy)).collect())
        };
        let result = RunResult {
            method: config.method,
            corpus: config.corpus.clone(),
            n_per_class: config.n_per_class,
            unlabeled_cap: config.unlabeled_cap,
            config_hash: config.config_hash()?,
            parity_hash: config.parity_hash()?,
            config: config.clone(),
            complete: seeds.iter().all(|s| s.completed),
            best: pick(|s| s.best),
            last: pick(|s| s.last),
            seeds,
        };
        if let Some(dir) = &run_dir {
            result.save(&dir.join("run_result.json"))?;
        }
        Ok(result)
    }

    pub fn run_method(&self, method: Method, out_dir: Option<&Path>) -> Result<RunResult> {
        self.run(&self.config.with_method(method), out_dir)
    }

    /// Semantic-only and matching-only variants.
    pub fn run_ablation_structure(&self, out_dir: Option<&Path>) -> Result<(RunResult, RunResult)> {
        Ok((
            self.run_method(Method::PcmSemanticOnly, out_dir)?,
            self.run_method(Method::PcmMatchingOnly, out_dir)?,
        ))
    }

    /// Frozen initial CSR versus progressive updates.
    pub fn run_ablation_csr_update(&self, out_dir: Option<&Path>) -> Result<(RunResult, RunResult)> {
        Ok((
            self.run_method(Method::PcmNoCsrUpdate, out_dir)?,
            self.run_method(Method::Pcm, out_dir)?,
        ))
    }

    /// Two heads and agreement gating without CSRs.
    pub fn run_ablation_dcdl(&self, out_dir: Option<&Path>) -> Result<RunResult> {
        self.run_method(Method::UdaDcdl, out_dir)
    }

    /// The configured method at each unlabeled pool size.
    pub fn run_unlabeled_sweep(&self, pool_sizes: &[usize], out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
        pool_sizes
            .iter()
            .map(|&cap| {
                let config = ExperimentConfig {
                    unlabeled_cap: Some(cap),
                    ..self.config.clone()
                };
                self.run(&config, out_dir)
            })
            .collect()
    }
}

/// Prepares and runs `config` in one go.
pub fn run_method(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunResult> {
    Experiment::prepare(config.clone())?.run(config, out_dir)
}
