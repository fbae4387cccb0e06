use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pcm_core::csr::{probe_inherent_matching, ScoreAggregation};
use pcm_core::encoder::{Backbone, EncoderSource, CACHE_DIR_ENV, TOY_WORD_INIT_STD};
use pcm_core::experiments::report;
use pcm_core::experiments::{DataSource, Experiment, ExperimentConfig, Method, RunResult};
use pcm_core::fixture::{probe_examples, PROBE_CLASS_WORDS};
use pcm_core::ssl::KlDirection;
use pcm_core::{LayoutSpec, Precision};

#[derive(Parser)]
#[command(name = "pcm", version, about = "Semi-supervised text classification with progressive class-semantic matching")]
struct Cli {
    /// Directory holding pretrained checkpoints (`<dir>/<id>/`).
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-token class affinity of a raw encoder for sentence/class-word pairs.
    Probe(ProbeArgs),
    /// Fine-tune on the labeled set and write the initial CSRs per seed.
    InitCsr(ExpArgs),
    /// Train and evaluate one method over all seeds.
    Train(ExpArgs),
    /// Run an ablation group.
    Ablate {
        #[arg(long, value_enum, default_value_t = Ablation::All)]
        kind: Ablation,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Vary the unlabeled pool size.
    Sweep {
        /// Comma-separated pool sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [500usize, 1000, 2000])]
        pool_sizes: Vec<usize>,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Build tables and plots from saved run results.
    Report {
        /// Directory searched recursively for run_result.json files.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated class names for the CSR tables.
        #[arg(long, value_delimiter = ',')]
        class_names: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Structure,
    CsrUpdate,
    Dcdl,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint id under the cache directory, or `toy` for a random encoder.
    #[arg(long, default_value = "bert-base-uncased")]
    encoder: String,
    /// Sentence to probe; the bundled examples are used when absent.
    #[arg(long)]
    text: Option<String>,
    /// One word per class.
    #[arg(long, value_delimiter = ',')]
    class_words: Vec<String>,
    #[arg(long, default_value = "probe.json")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ExpArgs {
    /// Base configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale synthetic setup.
    #[arg(long)]
    fixture: bool,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    test_file: Option<PathBuf>,
    /// Augmented views aligned with the training file.
    #[arg(long)]
    augmentations: Option<PathBuf>,
    #[arg(long)]
    delimiter: Option<char>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    method: Option<Method>,
    /// Checkpoint id under the cache directory, or `toy`.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    toy_seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    confid1: Option<f64>,
    #[arg(long)]
    confid2: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_j: Option<usize>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    head_lr: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    labeled_batch: Option<usize>,
    #[arg(long)]
    unlabeled_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    check_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    unlabeled_cap: Option<usize>,
    #[arg(long)]
    test_cap: Option<usize>,
    #[arg(long)]
    init_epochs: Option<usize>,
    /// `target-to-prediction` or `prediction-to-target`.
    #[arg(long)]
    kl_direction: Option<String>,
    /// `sum` or `mean` across word occurrences.
    #[arg(long)]
    score_aggregation: Option<String>,
    /// JSON file with one list of words per class, replacing mined CSRs.
    #[arg(long)]
    seed_words: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("invalid value {s:?}"))
}

impl ExpArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, self.fixture) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, true) => ExperimentConfig::fixture(Method::Pcm),
            (None, false) => ExperimentConfig::default(),
        };
        if let Some(v) = &self.corpus {
            c.corpus = v.clone();
        }
        if self.train_file.is_some() || self.test_file.is_some() || self.augmentations.is_some() || self.delimiter.is_some() {
            let (mut train, mut test, mut aug, mut delim) = match &c.data {
                DataSource::Files {
                    train,
                    test,
                    augmentations,
                    delimiter,
                } => (train.clone(), test.clone(), augmentations.clone(), *delimiter),
                DataSource::Fixture(_) => (PathBuf::new(), PathBuf::new(), None, ','),
            };
            if let Some(v) = &self.train_file {
                train = v.clone();
            }
            if let Some(v) = &self.test_file {
                test = v.clone();
            }
            if self.augmentations.is_some() {
                aug = self.augmentations.clone();
            }
            if let Some(d) = self.delimiter {
                delim = d;
            }
            c.data = DataSource::Files {
                train,
                test,
                augmentations: aug,
                delimiter: delim,
            };
        }
        macro_rules! set {
            ($field:expr, $v:expr) => {
                if let Some(v) = $v {
                    $field = v;
                }
            };
        }
        set!(c.n_per_class, self.n_per_class);
        set!(c.seeds, self.seeds.clone());
        set!(c.method, self.method);
        if let Some(e) = &self.encoder {
            c.encoder = if e == "toy" {
                EncoderSource::Toy {
                    seed: self.toy_seed.unwrap_or(11),
                    word_init_std: TOY_WORD_INIT_STD,
                }
            } else {
                EncoderSource::Checkpoint { id: e.clone() }
            };
        } else if let (Some(s), EncoderSource::Toy { seed, .. }) = (self.toy_seed, &mut c.encoder) {
            *seed = s;
        }
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        set!(c.train.gate.confid1, self.confid1);
        set!(c.train.gate.confid2, self.confid2);
        set!(c.train.gate.temperature, self.temperature);
        set!(c.train.mining.top_j, self.top_j);
        set!(c.head.hidden_size, self.head_hidden);
        set!(c.train.encoder_lr, self.encoder_lr);
        set!(c.train.head_lr, self.head_lr);
        set!(c.train.lambda_u, self.lambda_u);
        set!(c.train.labeled_batch, self.labeled_batch);
        set!(c.train.unlabeled_batch, self.unlabeled_batch);
        set!(c.train.epochs, self.epochs);
        set!(c.train.check_every, self.check_every);
        set!(c.max_len, self.max_len);
        set!(c.init_epochs, self.init_epochs);
        if self.max_steps.is_some() {
            c.train.max_steps = self.max_steps;
        }
        if self.patience.is_some() {
            c.train.patience = self.patience;
        }
        if self.unlabeled_cap.is_some() {
            c.unlabeled_cap = self.unlabeled_cap;
        }
        if self.test_cap.is_some() {
            c.test_cap = self.test_cap;
        }
        if let Some(k) = &self.kl_direction {
            c.train.kl_direction = parse_kebab::<KlDirection>(k)?;
        }
        if let Some(a) = &self.score_aggregation {
            c.train.mining.aggregation = parse_kebab::<ScoreAggregation>(a)?;
        }
        if let Some(path) = &self.seed_words {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.seed_words = Some(serde_json::from_str(&text)?);
        }
        c.validate()?;
        Ok(c)
    }
}

fn class_names(config: &ExperimentConfig, k: usize) -> Vec<String> {
    match &config.data {
        DataSource::Fixture(f) => f.class_names(),
        DataSource::Files { .. } => (0..k).map(|c| c.to_string()).collect(),
    }
}

fn save_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

fn summarize(r: &RunResult) {
    println!(
        "{:<20} n={:<4} best {:>14}  last {:>14}  seeds {}/{}  config {}",
        r.method.name(),
        r.n_per_class,
        report::format_cell(Some(&r.best)),
        report::format_cell(Some(&r.last)),
        r.seeds.iter().filter(|s| s.completed).count(),
        r.seeds.len(),
        &r.config_hash[..12]
    );
    for s in r.seeds.iter().filter(|s| !s.completed) {
        eprintln!("  seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
    }
}

fn finish(results: &[RunResult], config: &ExperimentConfig, out: &Path, k: usize) -> Result<bool> {
    for r in results {
        summarize(r);
    }
    report::write_report(results, &class_names(config, k), &out.join("report"))?;
    Ok(results.iter().all(|r| r.complete))
}

fn run_probe(args: &ProbeArgs) -> Result<bool> {
    let examples: Vec<(String, Option<usize>)> = match &args.text {
        Some(t) => vec![(t.clone(), None)],
        None => probe_examples().into_iter().map(|(t, y)| (t, Some(y))).collect(),
    };
    let words: Vec<String> = if args.class_words.is_empty() {
        PROBE_CLASS_WORDS.iter().map(|s| s.to_string()).collect()
    } else {
        args.class_words.clone()
    };
    let backbone = if args.encoder == "toy" {
        let texts = examples.iter().map(|(t, _)| t.as_str()).chain(words.iter().map(String::as_str));
        Backbone::load(
            &EncoderSource::Toy {
                seed: 11,
                word_init_std: TOY_WORD_INIT_STD,
            },
            Precision::F32,
            texts,
        )?
    } else {
        Backbone::load(
            &EncoderSource::Checkpoint {
                id: args.encoder.clone(),
            },
            Precision::F32,
            std::iter::empty(),
        )?
    };
    let spec = LayoutSpec {
        max_len: backbone.encoder.config().max_positions.min(256),
        truncation: pcm_core::data::Truncation::Head,
        specials: backbone.tokenizer.specials(),
    };
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let mut results = Vec::new();
    for (text, label) in &examples {
        let r = probe_inherent_matching(&backbone.encoder, backbone.tokenizer.as_ref(), text, &refs, &spec)?;
        let top = pcm_core::model::argmax(&r.cosine);
        println!(
            "{:?}: top cosine class {} ({}){}",
            text.chars().take(48).collect::<String>(),
            top,
            words[top],
            label.map_or(String::new(), |y| format!(", gold {y} ({})", words.get(y).map_or("?", |s| s)))
        );
        results.push(serde_json::json!({ "gold": label, "result": r }));
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&results)?)?;
    println!("wrote {}", args.out.display());
    Ok(true)
}

fn run_init_csr(args: &ExpArgs) -> Result<bool> {
    let config = args.build()?;
    if !config.method.spec().layout.uses_csr() {
        bail!("method {} does not use CSRs", config.method);
    }
    save_config(&config, &args.out)?;
    let exp = Experiment::prepare(config.clone())?;
    for &seed in &config.seeds {
        let (data, manifest) = exp.train_data(&config, seed)?;
        let csr = exp.initial_csr(&config, &data, seed)?;
        let dir = args.out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        manifest.save(&dir.join("manifest.json"))?;
        csr.save(&dir.join("csr_v0.json"))?;
        let names = class_names(&config, exp.num_classes());
        for c in &csr.classes {
            let words: Vec<&str> = c.words.iter().take(10).map(|w| w.word.as_str()).collect();
            println!("seed {seed} {:>10}: {}", names[c.class_id], words.join(", "));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(dir) = &cli.cache_dir {
        std::env::set_var(CACHE_DIR_ENV, dir);
    }
    let outcome = match &cli.command {
        Command::Probe(args) => run_probe(args),
        Command::InitCsr(args) => run_init_csr(args),
        Command::Train(args) => (|| {
            let config = args.build()?;
            save_config(&config, &args.out)?;
            let exp = Experiment::prepare(config.clone())?;
            let r = exp.run(&config, Some(&args.out))?;
            finish(&[r], &config, &args.out, exp.num_classes())
        })(),
        Command::Ablate { kind, exp: args } => (|| {
            let config = args.build()?;
            save_config(&config, &args.out)?;
            let exp = Experiment::prepare(config.clone())?;
            let out = Some(args.out.as_path());
            let mut results = Vec::new();
            if matches!(kind, Ablation::Structure | Ablation::All) {
                let (a, b) = exp.run_ablation_structure(out)?;
                results.extend([a, b]);
            }
            if matches!(kind, Ablation::CsrUpdate | Ablation::All) {
                let (a, b) = exp.run_ablation_csr_update(out)?;
                results.extend([a, b]);
            }
            if matches!(kind, Ablation::Dcdl | Ablation::All) {
                results.push(exp.run_ablation_dcdl(out)?);
                results.push(exp.run_method(Method::Uda, out)?);
            }
            finish(&results, &config, &args.out, exp.num_classes())
        })(),
        Command::Sweep { pool_sizes, exp: args } => (|| {
            let config = args.build()?;
            save_config(&config, &args.out)?;
            let exp = Experiment::prepare(config.clone())?;
            let results = exp.run_unlabeled_sweep(pool_sizes, Some(&args.out))?;
            finish(&results, &config, &args.out, exp.num_classes())
        })(),
        Command::Report {
            results,
            out,
            class_names,
        } => (|| {
            let rs = report::collect_results(results)?;
            if rs.is_empty() {
                bail!("no run_result.json found under {}", results.display());
            }
            let names = if class_names.is_empty() {
                match &rs[0].config.data {
                    DataSource::Fixture(f) => f.class_names(),
                    DataSource::Files { .. } => Vec::new(),
                }
            } else {
                class_names.clone()
            };
            report::write_report(&rs, &names, out)?;
            println!("wrote {}", out.join("report.md").display());
            Ok(rs.iter().all(|r| r.complete))
        })(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some seed runs did not complete");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
