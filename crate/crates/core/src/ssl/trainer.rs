use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gate, labeled_loss, scalar, unlabeled_loss, GateConfig, GateMode, KlDirection, PseudoTarget};
use crate::csr::{
    build_csr, mine_attention_table, update_csr, CsrSet, EncoderEmbedder, MiningConfig, MiningInput,
    MiningSentence, StopWords, UpdateTrigger, WordSource,
};
use crate::encoder::{BertEncoder, LayoutSpec};
use crate::error::{Error, Result};
use crate::model::{predict_from, HeadConfig, ModelLayout, PcmModel, PredictionHead};
use crate::tokenizer::{TextTokenizer, TokenizedText};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    /// Weight of the unlabeled loss.
    pub lambda_u: f64,
    /// Off for purely supervised baselines.
    pub use_unlabeled: bool,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Passes over the unlabeled pool (over the labeled set when the pool is
    /// empty).
    pub epochs: usize,
    pub max_steps: Option<usize>,
    /// Steps between validation checks (CSR trigger and test evaluation);
    /// 0 disables checks.
    pub check_every: usize,
    /// Stop after this many checks without a new validation gate-count
    /// maximum, once the count has left zero.
    pub patience: Option<usize>,
    pub log_every: usize,
    pub gate: GateConfig,
    pub gate_mode: GateMode,
    pub kl_direction: KlDirection,
    pub csr_updates: bool,
    pub mining: MiningConfig,
    /// Cap on how much of the unlabeled pool is scanned for qualifying
    /// sentences at a CSR update.
    pub update_pool_cap: Option<usize>,
    pub eval_batch: usize,
    pub prediction_head: PredictionHead,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 5e-6,
            head_lr: 5e-4,
            weight_decay: 0.01,
            lambda_u: 1.0,
            use_unlabeled: true,
            labeled_batch: 4,
            unlabeled_batch: 8,
            epochs: 20,
            max_steps: None,
            check_every: 200,
            patience: Some(10),
            log_every: 10,
            gate: GateConfig::default(),
            gate_mode: GateMode::Agreement,
            kl_direction: KlDirection::TargetToPrediction,
            csr_updates: true,
            mining: MiningConfig::default(),
            update_pool_cap: Some(10_000),
            eval_batch: 32,
            prediction_head: PredictionHead::Semantic,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.encoder_lr < 0.0 || self.head_lr < 0.0 || self.lambda_u < 0.0 {
            return Err(Error::Config("learning rates and lambda_u must be non-negative".into()));
        }
        if self.mining.top_j == 0 {
            return Err(Error::Config("top_j must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-tokenized training material.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<(TokenizedText, usize)>,
    /// Original text and its augmented view.
    pub unlabeled: Vec<(TokenizedText, TokenizedText)>,
    /// Unlabeled sentences that drive the CSR update trigger.
    pub validation: Vec<TokenizedText>,
    pub test: Vec<(TokenizedText, usize)>,
}

impl TrainData {
    pub fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        if self.unlabeled.is_empty() {
            self.labeled.len().div_ceil(cfg.labeled_batch)
        } else {
            self.unlabeled.len().div_ceil(cfg.unlabeled_batch)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub labeled: f64,
    pub unlabeled: f64,
    pub unlabeled_rows: usize,
    pub gated_rows: usize,
    /// Rows meeting each gate condition on their own.
    pub condition_counts: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: f64,
    pub loss_total: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub unlabeled_rows: usize,
    pub gated_rows: usize,
    pub gate_pass_rate: f64,
    pub semantic_confidence_rate: f64,
    pub matching_confidence_rate: f64,
    pub agreement_rate: f64,
    pub csr_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub step: usize,
    pub validation_size: usize,
    /// Validation sentences passing the gate.
    pub qualifying_count: usize,
    pub semantic_confidence_rate: f64,
    pub matching_confidence_rate: f64,
    pub agreement_rate: f64,
    pub triggered: bool,
    pub csr_updated: bool,
    pub csr_version: Option<u64>,
    pub test_accuracy: Option<f64>,
    /// Gated validation sentences per pseudo-label class.
    #[serde(default)]
    pub pseudo_label_counts: Vec<usize>,
    /// Test rows per predicted class.
    #[serde(default)]
    pub test_prediction_counts: Vec<usize>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Check(CheckRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub qualifying_count: usize,
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PcmModel,
    pub csr: Option<CsrSet>,
    /// Every CSR version that was active, oldest first.
    pub csr_history: Vec<CsrSet>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
    /// Test accuracy at the check with the highest validation gate count
    /// (latest among ties).
    pub best: Option<EvalPoint>,
    /// Test accuracy after the final step.
    pub last: Option<EvalPoint>,
}

impl TrainOutcome {
    pub fn checks(&self) -> impl Iterator<Item = &CheckRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Check(c) => Some(c),
            LogRecord::Step(_) => None,
        })
    }

    pub fn step_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Check(_) => None,
        })
    }
}

/// Endless shuffled passes over `0..n`.
#[derive(Debug)]
struct Sampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.n == 0 {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn rate(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

fn condition_counts(targets: &[PseudoTarget]) -> [usize; 3] {
    let mut c = [0; 3];
    for t in targets {
        for (slot, &met) in c.iter_mut().zip(&t.conditions) {
            *slot += usize::from(met);
        }
    }
    c
}

/// Test accuracy in percent.
pub fn evaluate(
    model: &PcmModel,
    csr: Option<&CsrSet>,
    data: &[(TokenizedText, usize)],
    spec: &LayoutSpec,
    batch_size: usize,
    head: PredictionHead,
) -> Result<f64> {
    Ok(evaluate_detailed(model, csr, data, spec, batch_size, head)?.0)
}

/// Accuracy in percent plus how many rows were predicted as each class.
pub fn evaluate_detailed(
    model: &PcmModel,
    csr: Option<&CsrSet>,
    data: &[(TokenizedText, usize)],
    spec: &LayoutSpec,
    batch_size: usize,
    head: PredictionHead,
) -> Result<(f64, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut correct = 0;
    let mut counts = vec![0; model.num_classes()];
    for chunk in data.chunks(batch_size.max(1)) {
        let texts: Vec<&TokenizedText> = chunk.iter().map(|(t, _)| t).collect();
        let batch = model.encode(&texts, csr, spec)?;
        let pred = model.predict(&batch, csr, head)?;
        for &p in &pred {
            counts[p] += 1;
        }
        correct += pred.iter().zip(chunk).filter(|(p, (_, y))| *p == y).count();
    }
    Ok((100.0 * correct as f64 / data.len() as f64, counts))
}

/// Gate outcomes for `texts` under the current model, in evaluation mode.
fn gate_texts(
    model: &PcmModel,
    csr: Option<&CsrSet>,
    texts: &[&TokenizedText],
    spec: &LayoutSpec,
    cfg: &TrainConfig,
) -> Result<Vec<PseudoTarget>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(cfg.eval_batch) {
        let batch = model.encode(chunk, csr, spec)?;
        let values = model.forward(&batch, csr, None)?.values()?;
        out.extend(gate(&values, &cfg.gate, cfg.gate_mode)?);
    }
    Ok(out)
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: PcmModel,
    csr: Option<CsrSet>,
    data: &'a TrainData,
    spec: LayoutSpec,
    tokenizer: &'a dyn TextTokenizer,
    stopwords: StopWords,
    encoder_opt: AdamW,
    head_opt: AdamW,
    labeled_sampler: Sampler,
    unlabeled_sampler: Sampler,
    labeled_dropout: ChaCha8Rng,
    unlabeled_dropout: ChaCha8Rng,
    trigger: UpdateTrigger,
    step: usize,
    log: Vec<LogRecord>,
    log_file: Option<BufWriter<File>>,
    out_dir: Option<PathBuf>,
    csr_history: Vec<CsrSet>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        model: PcmModel,
        csr: Option<CsrSet>,
        data: &'a TrainData,
        spec: LayoutSpec,
        tokenizer: &'a dyn TextTokenizer,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::Data("no labeled examples".into()));
        }
        if model.layout().uses_csr() && csr.is_none() {
            return Err(Error::Config("CSR layout needs an initial CSR".into()));
        }
        let adamw = |lr| ParamsAdamW {
            lr,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        };
        let encoder_opt = AdamW::new(model.encoder_vars(), adamw(cfg.encoder_lr))?;
        let head_opt = AdamW::new(model.head_vars(), adamw(cfg.head_lr))?;
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        let labeled_sampler = Sampler::new(data.labeled.len(), seeds.gen());
        let unlabeled_sampler = Sampler::new(data.unlabeled.len(), seeds.gen());
        let labeled_dropout = ChaCha8Rng::seed_from_u64(seeds.gen());
        let unlabeled_dropout = ChaCha8Rng::seed_from_u64(seeds.gen());
        let csr_history = csr.iter().cloned().collect();
        Ok(Self {
            cfg,
            model,
            csr,
            data,
            spec,
            tokenizer,
            stopwords: StopWords::default(),
            encoder_opt,
            head_opt,
            labeled_sampler,
            unlabeled_sampler,
            labeled_dropout,
            unlabeled_dropout,
            trigger: UpdateTrigger::default(),
            step: 0,
            log: Vec::new(),
            log_file: None,
            out_dir: None,
            csr_history,
        })
    }

    /// Appends the log to `<dir>/train_log.jsonl` and writes checkpoints
    /// under `<dir>/checkpoints` and CSR snapshots under `<dir>/csr`.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let file = File::options()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.log_file = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        if let Some(csr) = &self.csr {
            self.snapshot_csr(csr)?;
        }
        Ok(self)
    }

    pub fn with_stopwords(mut self, stopwords: StopWords) -> Self {
        self.stopwords = stopwords;
        self
    }

    pub fn model(&self) -> &PcmModel {
        &self.model
    }

    pub fn csr(&self) -> Option<&CsrSet> {
        self.csr.as_ref()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        let planned = self.cfg.epochs * self.data.steps_per_epoch(&self.cfg);
        self.cfg.max_steps.map_or(planned, |m| m.min(planned))
    }

    fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.log_file {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn snapshot_csr(&self, csr: &CsrSet) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let dir = dir.join("csr");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            csr.save(&dir.join(format!("v{}.json", csr.version)))?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let dir = dir.join("checkpoints").join(name);
            self.model.save(&dir, self.csr.as_ref().map(|c| c.version))?;
            if let Some(csr) = &self.csr {
                csr.save(&dir.join("csr.json"))?;
            }
        }
        Ok(())
    }

    /// One optimizer step on a labeled batch and, when enabled, an
    /// unlabeled original/augmented batch.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let csr = self.csr.as_ref();
        let idx = self.labeled_sampler.next(self.cfg.labeled_batch);
        let texts: Vec<&TokenizedText> = idx.iter().map(|&i| &self.data.labeled[i].0).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.labeled[i].1).collect();
        let batch = self.model.encode(&texts, csr, &self.spec)?;
        let out = self.model.forward(&batch, csr, Some(&mut self.labeled_dropout))?;
        let l_l = labeled_loss(&out, &labels)?;
        let mut losses = StepLosses {
            labeled: scalar(&l_l)?,
            ..StepLosses::default()
        };

        let mut total = l_l;
        if self.cfg.use_unlabeled && !self.data.unlabeled.is_empty() {
            let idx = self.unlabeled_sampler.next(self.cfg.unlabeled_batch);
            let originals: Vec<&TokenizedText> = idx.iter().map(|&i| &self.data.unlabeled[i].0).collect();
            let targets = gate_texts(&self.model, csr, &originals, &self.spec, &self.cfg)?;
            losses.unlabeled_rows = targets.len();
            losses.condition_counts = condition_counts(&targets);
            let passed: Vec<usize> = (0..targets.len()).filter(|&r| targets[r].passed).collect();
            losses.gated_rows = passed.len();
            if !passed.is_empty() {
                let augmented: Vec<&TokenizedText> = passed.iter().map(|&r| &self.data.unlabeled[idx[r]].1).collect();
                let kept: Vec<PseudoTarget> = passed.iter().map(|&r| targets[r].clone()).collect();
                let batch = self.model.encode(&augmented, csr, &self.spec)?;
                let out = self.model.forward(&batch, csr, Some(&mut self.unlabeled_dropout))?;
                let l_u = unlabeled_loss(&out, &kept, self.cfg.kl_direction)?;
                losses.unlabeled = scalar(&l_u)?;
                if self.cfg.lambda_u > 0.0 {
                    total = (total + (l_u * self.cfg.lambda_u)?)?;
                }
            }
        }
        losses.total = scalar(&total)?;
        if !losses.total.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: losses.total,
            });
        }
        self.optimize(&total)?;
        self.step += 1;
        Ok(losses)
    }

    fn optimize(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.encoder_opt.step(&grads)?;
        self.head_opt.step(&grads)?;
        Ok(())
    }

    /// Counts validation sentences passing the gate, fires the CSR update
    /// on a new maximum, and evaluates on the test set.
    pub fn check(&mut self) -> Result<CheckRecord> {
        let validation: Vec<&TokenizedText> = self.data.validation.iter().collect();
        let targets = gate_texts(&self.model, self.csr.as_ref(), &validation, &self.spec, &self.cfg)?;
        let count = targets.iter().filter(|t| t.passed).count();
        let conds = condition_counts(&targets);
        let triggered = self.trigger.check(count);
        let mut updated = false;
        if triggered && self.cfg.csr_updates {
            if let Some(current) = &self.csr {
                let cap = self.cfg.update_pool_cap.unwrap_or(usize::MAX);
                let pool: Vec<&TokenizedText> = self.data.unlabeled.iter().take(cap).map(|(t, _)| t).collect();
                let pool_targets = gate_texts(&self.model, Some(current), &pool, &self.spec, &self.cfg)?;
                let qualifying: Vec<(&TokenizedText, usize)> = pool
                    .iter()
                    .zip(&pool_targets)
                    .filter_map(|(t, p)| p.label.filter(|_| p.passed).map(|y| (*t, y)))
                    .collect();
                let labeled: Vec<(&TokenizedText, usize)> = self.data.labeled.iter().map(|(t, y)| (t, *y)).collect();
                let mut next = update_csr(
                    current,
                    &labeled,
                    &qualifying,
                    self.model.encoder(),
                    self.tokenizer,
                    &self.spec,
                    &self.stopwords,
                    &self.cfg.mining,
                )?;
                next.qualifying_count = Some(count);
                log::info!(
                    "step {}: CSR v{} from {} qualifying sentences (validation count {count})",
                    self.step,
                    next.version,
                    qualifying.len()
                );
                self.snapshot_csr(&next)?;
                self.csr_history.push(next.clone());
                self.csr = Some(next);
                updated = true;
                self.checkpoint(&format!("step-{:06}", self.step))?;
            }
        }
        let (test_accuracy, test_prediction_counts) = if self.data.test.is_empty() {
            (None, Vec::new())
        } else {
            let (acc, counts) = evaluate_detailed(
                &self.model,
                self.csr.as_ref(),
                &self.data.test,
                &self.spec,
                self.cfg.eval_batch,
                self.cfg.prediction_head,
            )?;
            (Some(acc), counts)
        };
        let mut pseudo_label_counts = vec![0; self.model.num_classes()];
        for y in targets.iter().filter_map(|t| t.label) {
            pseudo_label_counts[y] += 1;
        }
        let n = validation.len();
        let rec = CheckRecord {
            step: self.step,
            validation_size: n,
            qualifying_count: count,
            semantic_confidence_rate: rate(conds[0], n),
            matching_confidence_rate: rate(conds[1], n),
            agreement_rate: rate(conds[2], n),
            triggered,
            csr_updated: updated,
            csr_version: self.csr.as_ref().map(|c| c.version),
            test_accuracy,
            pseudo_label_counts,
            test_prediction_counts,
        };
        self.record(LogRecord::Check(rec.clone()))?;
        Ok(rec)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        let total = self.total_steps();
        let per_epoch = self.data.steps_per_epoch(&self.cfg).max(1);
        let mut best: Option<EvalPoint> = None;
        let mut last_check: Option<CheckRecord> = None;
        let mut stale_checks = 0;
        for s in 1..=total {
            let losses = self.train_step()?;
            if self.cfg.log_every > 0 && (s % self.cfg.log_every == 0 || s == total) {
                let rec = StepRecord {
                    step: s,
                    epoch: s as f64 / per_epoch as f64,
                    loss_total: losses.total,
                    loss_labeled: losses.labeled,
                    loss_unlabeled: losses.unlabeled,
                    unlabeled_rows: losses.unlabeled_rows,
                    gated_rows: losses.gated_rows,
                    gate_pass_rate: rate(losses.gated_rows, losses.unlabeled_rows),
                    semantic_confidence_rate: rate(losses.condition_counts[0], losses.unlabeled_rows),
                    matching_confidence_rate: rate(losses.condition_counts[1], losses.unlabeled_rows),
                    agreement_rate: rate(losses.condition_counts[2], losses.unlabeled_rows),
                    csr_version: self.csr.as_ref().map(|c| c.version),
                };
                self.record(LogRecord::Step(rec))?;
            }
            let due = self.cfg.check_every > 0 && s % self.cfg.check_every == 0;
            if due || (s == total && (self.cfg.check_every > 0 || !self.data.test.is_empty())) {
                let previous_max = self.trigger.running_max;
                let rec = self.check()?;
                if let Some(acc) = rec.test_accuracy {
                    if best.is_none_or(|b| rec.qualifying_count >= b.qualifying_count) {
                        best = Some(EvalPoint {
                            step: rec.step,
                            qualifying_count: rec.qualifying_count,
                            accuracy: acc,
                        });
                    }
                }
                stale_checks = if rec.qualifying_count > previous_max { 0 } else { stale_checks + 1 };
                last_check = Some(rec);
                if let Some(p) = self.cfg.patience {
                    if self.trigger.running_max > 0 && stale_checks >= p && s < total {
                        log::info!("step {s}: no new validation maximum in {p} checks, stopping");
                        break;
                    }
                }
            }
        }
        // Early stopping can leave the final step unevaluated.
        if last_check.as_ref().is_some_and(|c| c.step != self.step) {
            last_check = Some(self.check()?);
        }
        self.checkpoint("final")?;
        let last = last_check.and_then(|c| {
            c.test_accuracy.map(|accuracy| EvalPoint {
                step: c.step,
                qualifying_count: c.qualifying_count,
                accuracy,
            })
        });
        Ok(TrainOutcome {
            model: self.model,
            csr: self.csr,
            csr_history: self.csr_history,
            log: self.log,
            steps: self.step,
            best,
            last,
        })
    }
}

/// Fine-tunes a copy of `encoder` with a plain K-way head on the labeled
/// set, then mines its last-layer attention over the labeled set to build
/// the version-0 CSRs. Embeddings come from `encoder`, the network the CSRs
/// will be injected into.
#[allow(clippy::too_many_arguments)]
pub fn initialize_csr(
    encoder: &BertEncoder,
    tokenizer: &dyn TextTokenizer,
    labeled: &[(TokenizedText, usize)],
    num_classes: usize,
    spec: &LayoutSpec,
    cfg: &TrainConfig,
    head: HeadConfig,
    finetune_epochs: usize,
    stopwords: &StopWords,
) -> Result<CsrSet> {
    for class in 0..num_classes {
        if !labeled.iter().any(|(_, y)| *y == class) {
            return Err(Error::EmptyClass { class });
        }
    }
    let model = PcmModel::new(encoder.deep_clone()?, num_classes, ModelLayout::PLAIN, head, cfg.seed)?;
    let data = TrainData {
        labeled: labeled.to_vec(),
        ..TrainData::default()
    };
    let ft_cfg = TrainConfig {
        use_unlabeled: false,
        csr_updates: false,
        epochs: finetune_epochs,
        max_steps: None,
        check_every: 0,
        patience: None,
        log_every: 0,
        ..cfg.clone()
    };
    let tuned = Trainer::new(ft_cfg, model, None, &data, *spec, tokenizer)?.run()?;
    let sentences: Vec<MiningSentence<'_>> = labeled
        .iter()
        .map(|(text, class)| MiningSentence {
            text,
            class: *class,
            source: WordSource::Labeled,
        })
        .collect();
    let table = mine_attention_table(
        tuned.model.encoder(),
        &sentences,
        num_classes,
        MiningInput::Plain,
        spec,
        stopwords,
        cfg.mining.batch_size,
    )?;
    let embedder = EncoderEmbedder { tokenizer, encoder };
    build_csr(&table, cfg.mining.top_j, cfg.mining.aggregation, &embedder, 0)
}

/// Head predictions on `texts`, for callers that need raw classes.
pub fn predict_texts(
    model: &PcmModel,
    csr: Option<&CsrSet>,
    texts: &[&TokenizedText],
    spec: &LayoutSpec,
    batch_size: usize,
    head: PredictionHead,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let batch = model.encode(chunk, csr, spec)?;
        let values = model.forward(&batch, csr, None)?.values()?;
        out.extend(predict_from(&values, head)?);
    }
    Ok(out)
}
