//! Training loops: masked-LM continued pretraining (full model or adapters),
//! tagging and sentence-classification fine-tuning with early stopping and
//! grid search, and seed-replicated runs.
//!
//! A step consumes `effective_batch` examples in micro-batches of
//! `micro_batch`; the step gradient is the mean over the whole batch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::stage_rng;
use crate::datasets::{LabeledSentence, NerSentence};
use crate::encoder::ops::log_softmax_row;
use crate::encoder::{
    make_masking_plan, save_checkpoint, Checkpoint, CheckpointKind, Encoder32, Group, Linear,
    MaskingConfig, Params, TrainableSet, Weights,
};
use crate::error::{Error, Result};
use crate::eval::{bio_decode_all, sentence_micro_f1, span_micro_f1, BioMode};
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{encode, encode_words, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Full,
    Adapter,
}

impl TrainMode {
    pub fn trainable(self) -> TrainableSet {
        match self {
            TrainMode::Full => TrainableSet::All,
            TrainMode::Adapter => TrainableSet::AdaptersAndHeads,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "adapter" => Ok(TrainMode::Adapter),
            _ => Err(Error::Config(format!("unknown training mode `{s}` (expected full or adapter)"))),
        }
    }
}

/// Metric used to select the best tagging epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevMetric {
    #[default]
    SpanF1,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    /// Optimizer steps for pretraining.
    #[serde(default)]
    pub max_steps: u64,
    /// Epoch cap for fine-tuning.
    #[serde(default)]
    pub max_epochs: usize,
    #[serde(default)]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    pub max_seq_len: usize,
    /// Linear warmup length in steps; zero keeps the rate constant.
    #[serde(default)]
    pub warmup_steps: u64,
    /// Bottleneck width used when adapters have to be inserted.
    #[serde(default)]
    pub adapter_dim: Option<usize>,
    #[serde(default)]
    pub dev_metric: DevMetric,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn new(learning_rate: f64, effective_batch: usize, micro_batch: usize, max_seq_len: usize) -> Self {
        Self {
            mode: TrainMode::Full,
            learning_rate,
            effective_batch,
            micro_batch,
            max_steps: 0,
            max_epochs: 0,
            early_stop_patience: 0,
            seed: 0,
            max_seq_len,
            warmup_steps: 0,
            adapter_dim: None,
            dev_metric: DevMetric::SpanF1,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn grad_accum_steps(&self) -> usize {
        self.effective_batch / self.micro_batch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.effective_batch % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "effective_batch {} is not divisible by micro_batch {}",
                self.effective_batch, self.micro_batch
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn lr_scale(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Mean training loss of every optimizer step.
    pub losses: Vec<f64>,
    /// Dev metric after every epoch (fine-tuning only).
    #[serde(default)]
    pub dev_history: Vec<f64>,
    pub best_dev: Option<f64>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

/// Puts the encoder into the trainable set of `mode`, inserting adapters
/// when adapter mode needs them.
pub fn prepare_encoder<R: Rng + ?Sized>(enc: &mut Encoder32, cfg: &TrainConfig, rng: &mut R) -> Result<()> {
    match cfg.mode {
        TrainMode::Full => enc.trainable = TrainableSet::All,
        TrainMode::Adapter => {
            if enc.config.adapter_dim.is_none() {
                let dim = cfg
                    .adapter_dim
                    .ok_or_else(|| Error::Config("adapter mode requires adapter_dim".into()))?;
                enc.add_adapters(dim, rng)?;
            }
            enc.trainable = TrainableSet::AdaptersAndHeads;
        }
    }
    Ok(())
}

/// Accumulates one optimizer step's gradient into `total`, visiting the
/// batch micro-batch by micro-batch. Every example adds its gradient with
/// weight `1 / batch.len()` straight into `total`, in batch order, so the
/// sum (the mean over micro-batch means) does not depend on `micro_batch`.
/// `example` returns `Some(loss)`, or `None` when there was nothing to score.
fn accumulate<P, F>(total: &mut P, batch: &[usize], micro_batch: usize, mut example: F) -> Result<f64>
where
    P: Params<f32>,
    F: FnMut(usize, &mut P, f32) -> Result<Option<f64>>,
{
    total.zero();
    let w = 1.0 / batch.len() as f32;
    let mut loss = 0.0;
    let mut scored = 0usize;
    for chunk in batch.chunks(micro_batch.max(1)) {
        for &i in chunk {
            if let Some(l) = example(i, total, w)? {
                loss += l;
                scored += 1;
            }
        }
    }
    Ok(if scored == 0 { 0.0 } else { loss / scored as f64 })
}

/// Masked-LM gradient and mean loss of one batch of sequences.
pub fn mlm_batch_gradient<R: Rng + ?Sized>(
    encoder: &Encoder32,
    batch: &[&[u32]],
    micro_batch: usize,
    masking: &MaskingConfig,
    rng: &mut R,
) -> Result<(f64, Weights<f32>)> {
    let mut total = encoder.weights.zeros_like();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let loss = mlm_accumulate(encoder, &mut total, batch, &idx, micro_batch, masking, rng)?;
    Ok((loss, total))
}

fn mlm_accumulate<R: Rng + ?Sized>(
    enc: &Encoder32,
    total: &mut Weights<f32>,
    corpus: &[&[u32]],
    batch: &[usize],
    micro_batch: usize,
    masking: &MaskingConfig,
    rng: &mut R,
) -> Result<f64> {
    let vocab_size = enc.config.vocab_size;
    accumulate(total, batch, micro_batch, |i, g, w| {
        let (plan, corrupted) = make_masking_plan(corpus[i], masking, vocab_size, rng)?;
        if plan.is_empty() {
            return Ok(None);
        }
        let fwd = enc.forward_train(&corrupted, rng)?;
        let l = enc.mlm_backward(&fwd, &plan.positions, &plan.original, w, g);
        Ok(Some(l.loss as f64))
    })
}

fn check_finite<P: Params<f32>>(loss: f64, grads: &P) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(())
}

/// Continues masked-LM pretraining of `encoder` on pre-encoded sequences.
///
/// On a non-finite loss or gradient the last good state is written to
/// `last_good` (when given) and a numeric error is returned.
pub fn pretrain_mlm(
    mut encoder: Encoder32,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    masking: &MaskingConfig,
    last_good: Option<&Path>,
) -> Result<(Encoder32, RunRecord)> {
    cfg.validate()?;
    masking.validate()?;
    let started = Instant::now();
    let mut rng = stage_rng(cfg.seed, "pretrain");
    prepare_encoder(&mut encoder, cfg, &mut rng)?;
    if cfg.max_steps > 0 && corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let mut record = RunRecord {
        seed: cfg.seed,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg.optimizer());
    let mut total = encoder.weights.zeros_like();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let seqs: Vec<&[u32]> = corpus.iter().map(Vec::as_slice).collect();

    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.effective_batch);
        while batch.len() < cfg.effective_batch {
            if cursor == order.len() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let loss = mlm_accumulate(&encoder, &mut total, &seqs, &batch, cfg.micro_batch, masking, &mut rng)?;
        if let Err(e) = check_finite(loss, &total) {
            log::error!("step {step}: {e}; keeping the last good state");
            if let Some(p) = last_good {
                save_checkpoint(p, &Checkpoint::from_encoder(&encoder, CheckpointKind::Full))?;
                record.checkpoint = Some(p.display().to_string());
            }
            return Err(e);
        }
        opt.step(&mut encoder.weights, &total, encoder.trainable, cfg.lr_scale(step));
        record.losses.push(loss);
        record.steps += 1;
        if step % 50 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((encoder, record))
}

/// Mean masked-LM loss over `corpus` with masks drawn from `seed`, so
/// different models can be compared on identical corruptions.
pub fn heldout_mlm_loss(encoder: &Encoder32, corpus: &[Vec<u32>], masking: &MaskingConfig, seed: u64) -> Result<f64> {
    let mut rng = stage_rng(seed, "heldout");
    let mut sum = 0.0;
    let mut n = 0usize;
    for ids in corpus {
        let (plan, corrupted) = make_masking_plan(ids, masking, encoder.config.vocab_size, &mut rng)?;
        if plan.is_empty() {
            continue;
        }
        sum += encoder.mlm_eval(&corrupted, &plan.positions, &plan.original)?.loss as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no maskable positions in held-out corpus".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Classify,
}

/// One encoded training example: input ids, the rows of the last layer that
/// are classified, and their target label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// An encoder with a linear classification head over selected positions:
/// first subtokens of words for tagging, `[CLS]` for sentence labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub task: Task,
    pub encoder: Encoder32,
    pub head: Linear<f32>,
    pub labels: Vec<String>,
}

impl TaskModel {
    pub fn new<R: Rng + ?Sized>(task: Task, encoder: Encoder32, labels: Vec<String>, rng: &mut R) -> Self {
        let d = encoder.config.hidden_dim;
        let std = encoder.config.init_std;
        Self {
            task,
            head: Linear::random(rng, d, labels.len(), std),
            encoder,
            labels,
        }
    }

    fn max_len(&self, cfg_len: usize) -> usize {
        cfg_len.min(self.encoder.config.max_seq_len)
    }

    fn label_id(&self, label: &str) -> Result<u32> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Data(format!("label `{label}` not in the label set")))
    }

    pub fn ner_example(&self, s: &NerSentence, vocab: &Vocabulary, max_len: usize) -> Result<Example> {
        let t = encode_words(&s.words, vocab, self.max_len(max_len));
        let targets = t
            .word_to_first_subtoken
            .iter()
            .enumerate()
            .map(|(w, _)| self.label_id(&s.tags[w]))
            .collect::<Result<_>>()?;
        Ok(Example {
            ids: t.subtoken_ids,
            positions: t.word_to_first_subtoken,
            targets,
        })
    }

    pub fn classify_example(&self, s: &LabeledSentence, vocab: &Vocabulary, max_len: usize) -> Result<Example> {
        let t = encode(&s.text, vocab, self.max_len(max_len));
        Ok(Example {
            ids: t.subtoken_ids,
            positions: vec![0],
            targets: vec![self.label_id(&s.label)?],
        })
    }

    pub fn logits(&self, ids: &[u32], positions: &[usize]) -> Result<Array2<f32>> {
        let fwd = self.encoder.forward(ids)?;
        Ok(self.head.forward(&fwd.last_hidden().select(Axis(0), positions)))
    }

    fn argmax_labels(&self, logits: &Array2<f32>) -> Vec<String> {
        logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                self.labels[best].clone()
            })
            .collect()
    }

    /// One tag per word; words cut off by truncation get `O`.
    pub fn predict_tags(&self, words: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Vec<String>> {
        let t = encode_words(words, vocab, self.max_len(max_len));
        let mut tags = vec!["O".to_owned(); words.len()];
        if !t.word_to_first_subtoken.is_empty() {
            let pred = self.argmax_labels(&self.logits(&t.subtoken_ids, &t.word_to_first_subtoken)?);
            tags[..pred.len()].clone_from_slice(&pred);
        }
        Ok(tags)
    }

    pub fn predict_label(&self, text: &str, vocab: &Vocabulary, max_len: usize) -> Result<String> {
        let t = encode(text, vocab, self.max_len(max_len));
        Ok(self.argmax_labels(&self.logits(&t.subtoken_ids, &[0])?).remove(0))
    }

    /// Mean cross-entropy of one example; accumulates `weight` times its
    /// gradient into `grads`.
    fn example_backward<R: Rng + ?Sized>(
        &self,
        ex: &Example,
        weight: f32,
        grads: &mut (Weights<f32>, Linear<f32>),
        rng: &mut R,
    ) -> Result<Option<f64>> {
        if ex.positions.is_empty() {
            return Ok(None);
        }
        let fwd = self.encoder.forward_train(&ex.ids, rng)?;
        let rows = fwd.last_hidden().select(Axis(0), &ex.positions);
        let mut d_logits = self.head.forward(&rows);
        let k = ex.targets.len() as f32;
        let mut loss = 0.0f64;
        for (mut row, &t) in d_logits.rows_mut().into_iter().zip(&ex.targets) {
            let lsm = log_softmax_row(row.view());
            loss -= lsm[t as usize] as f64;
            row.assign(&lsm.mapv(f32::exp));
            row[t as usize] -= 1.0;
            row.mapv_inplace(|v| v * weight / k);
        }
        let d_rows = self.head.backward(&rows, &d_logits, Some(&mut grads.1));
        let mut d_out = Array2::zeros(fwd.last_hidden().raw_dim());
        for (&p, r) in ex.positions.iter().zip(d_rows.rows()) {
            let mut o = d_out.row_mut(p);
            o += &r;
        }
        self.encoder.backward(&fwd, &d_out, &mut grads.0);
        Ok(Some(loss / k as f64))
    }

    fn mean_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for ex in examples.iter().filter(|e| !e.positions.is_empty()) {
            let logits = self.logits(&ex.ids, &ex.positions)?;
            let l: f64 = logits
                .rows()
                .into_iter()
                .zip(&ex.targets)
                .map(|(r, &t)| -log_softmax_row(r)[t as usize] as f64)
                .sum();
            sum += l / ex.targets.len() as f64;
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// Trains for `epochs` epochs, calling `after_epoch` with the epoch index
    /// after each one; training stops early when it returns `false`.
    fn train<F>(
        &mut self,
        examples: &[Example],
        cfg: &TrainConfig,
        batch_size: usize,
        micro_batch: usize,
        epochs: usize,
        rng: &mut ChaCha8Rng,
        record: &mut RunRecord,
        mut after_epoch: F,
    ) -> Result<()>
    where
        F: FnMut(&TaskModel, usize) -> Result<bool>,
    {
        let mut opt = AdamW::new(cfg.optimizer());
        let mut total = (self.encoder.weights.zeros_like(), self.head.zeros_like());
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(rng);
            for batch in order.chunks(batch_size) {
                let model = &*self;
                let loss = accumulate(&mut total, batch, micro_batch, |i, g, w| {
                    model.example_backward(&examples[i], w, g, rng)
                })?;
                check_finite(loss, &total)?;
                let trainable = self.encoder.trainable;
                let mut params = (&mut self.encoder.weights, &mut self.head);
                opt.step(&mut params, &total, trainable, cfg.lr_scale(record.steps));
                record.losses.push(loss);
                record.steps += 1;
            }
            if !after_epoch(self, epoch)? {
                break;
            }
        }
        Ok(())
    }

    /// Saves encoder, head and label set; adapter-mode models can be stored
    /// without base weights.
    pub fn to_checkpoint(&self, kind: CheckpointKind) -> Checkpoint {
        let mut ck = Checkpoint::from_encoder(&self.encoder, kind);
        ck.extend_from(&self.head);
        ck.meta = serde_json::json!({ "task": self.task, "labels": self.labels });
        ck
    }

    /// Rebuilds a task model; adapter-only checkpoints need `base`.
    pub fn from_checkpoint(ck: &Checkpoint, base: Option<Encoder32>) -> Result<Self> {
        let task: Task = serde_json::from_value(ck.meta["task"].clone())
            .map_err(|_| Error::Checkpoint("checkpoint carries no task head".into()))?;
        let labels: Vec<String> = serde_json::from_value(ck.meta["labels"].clone())
            .map_err(|_| Error::Checkpoint("checkpoint carries no label set".into()))?;
        let encoder = match ck.kind {
            CheckpointKind::Full => ck.to_encoder()?,
            CheckpointKind::Adapters => {
                let mut b = base.ok_or_else(|| Error::Checkpoint("adapter checkpoint needs a base model".into()))?;
                ck.apply_adapters(&mut b)?;
                b.trainable = ck.trainable;
                b
            }
        };
        let mut head = Linear::zeros(encoder.config.hidden_dim, labels.len());
        if ck.load_into(&mut head)? != 2 {
            return Err(Error::Checkpoint("task head tensors missing".into()));
        }
        Ok(Self {
            task,
            encoder,
            head,
            labels,
        })
    }
}

/// Verdict of [`EarlyStopper::observe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    epochs: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            epochs: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> Verdict {
        let epoch = self.epochs;
        self.epochs += 1;
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        if self.patience > 0 && self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::NoImprovement
        }
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs
    }
}

/// Calls `epoch` until `max_epochs` or early stopping; returns the stopper.
pub fn run_with_early_stopping<F>(max_epochs: usize, patience: usize, mut epoch: F) -> Result<EarlyStopper>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut s = EarlyStopper::new(patience);
    for e in 0..max_epochs {
        let m = epoch(e)?;
        if s.observe(m) == Verdict::Stop {
            break;
        }
    }
    Ok(s)
}

fn label_set<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    labels.collect::<BTreeSet<_>>().into_iter().map(str::to_owned).collect()
}

fn micro_for(cfg: &TrainConfig, batch: usize) -> usize {
    if cfg.micro_batch > 0 && batch % cfg.micro_batch == 0 {
        cfg.micro_batch
    } else {
        batch
    }
}

#[derive(Debug, Clone)]
pub struct NerOutcome {
    /// Model of the best dev epoch.
    pub model: TaskModel,
    pub record: RunRecord,
    pub epochs_run: usize,
}

/// Dev span-F1 (lenient BIO decoding) of a tagger.
pub fn ner_span_f1(model: &TaskModel, vocab: &Vocabulary, data: &[NerSentence], max_len: usize) -> Result<f64> {
    let gold: Vec<Vec<String>> = data.iter().map(|s| s.tags.clone()).collect();
    let pred: Vec<Vec<String>> = data
        .iter()
        .map(|s| model.predict_tags(&s.words, vocab, max_len))
        .collect::<Result<_>>()?;
    Ok(span_micro_f1(&bio_decode_all(&gold, BioMode::Lenient)?, &bio_decode_all(&pred, BioMode::Lenient)?).f1)
}

/// Fine-tunes a linear tagger over first-subtoken vectors, keeping the
/// epoch with the best dev metric.
pub fn finetune_ner(
    mut encoder: Encoder32,
    vocab: &Vocabulary,
    train: &[NerSentence],
    dev: &[NerSentence],
    cfg: &TrainConfig,
) -> Result<NerOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty NER training set".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("empty NER dev set".into()));
    }
    for s in train.iter().chain(dev) {
        if s.words.len() != s.tags.len() {
            return Err(Error::Data("word and tag counts differ".into()));
        }
        for t in &s.tags {
            crate::eval::parse_tag(t)?;
        }
    }
    let started = Instant::now();
    let mut rng = stage_rng(cfg.seed, "finetune-ner");
    prepare_encoder(&mut encoder, cfg, &mut rng)?;
    let labels = label_set(train.iter().chain(dev).flat_map(|s| s.tags.iter().map(String::as_str)));
    let mut model = TaskModel::new(Task::Ner, encoder, labels, &mut rng);
    let examples: Vec<Example> = train
        .iter()
        .map(|s| model.ner_example(s, vocab, cfg.max_seq_len))
        .collect::<Result<_>>()?;
    let dev_examples: Vec<Example> = dev
        .iter()
        .map(|s| model.ner_example(s, vocab, cfg.max_seq_len))
        .collect::<Result<_>>()?;

    let mut record = RunRecord {
        seed: cfg.seed,
        ..Default::default()
    };
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = model.clone();
    let mut dev_history = Vec::new();
    model.train(
        &examples,
        cfg,
        cfg.effective_batch,
        cfg.micro_batch,
        cfg.max_epochs,
        &mut rng,
        &mut record,
        |m, epoch| {
            let metric = match cfg.dev_metric {
                DevMetric::SpanF1 => ner_span_f1(m, vocab, dev, cfg.max_seq_len)?,
                DevMetric::Loss => -m.mean_loss(&dev_examples)?,
            };
            log::debug!("ner epoch {epoch}: dev {metric:.4}");
            dev_history.push(metric);
            let v = stopper.observe(metric);
            if v == Verdict::Improved {
                best = m.clone();
            }
            Ok(v != Verdict::Stop)
        },
    )?;
    record.dev_history = dev_history;
    record.best_dev = stopper.best;
    record.best_epoch = stopper.best_epoch;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(NerOutcome {
        model: best,
        record,
        epochs_run: stopper.epochs_seen(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub batch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyGrid {
    pub batches: Vec<usize>,
    pub epochs: Vec<usize>,
}

impl Default for ClassifyGrid {
    fn default() -> Self {
        Self {
            batches: vec![16, 32],
            epochs: vec![2, 4, 6],
        }
    }
}

impl ClassifyGrid {
    /// Cells in batch-major order.
    pub fn cells(&self) -> Vec<GridCell> {
        self.batches
            .iter()
            .flat_map(|&batch| self.epochs.iter().map(move |&epochs| GridCell { batch, epochs }))
            .collect()
    }
}

/// Index of the best-scoring cell (first on ties) and every cell's score.
pub fn grid_search<C, F>(cells: &[C], mut score: F) -> Result<(usize, Vec<f64>)>
where
    F: FnMut(&C) -> Result<f64>,
{
    if cells.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let scores: Vec<f64> = cells.iter().map(&mut score).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Per-label shuffled split; returns (first, second) index lists, each sorted,
/// with about `frac` of every label in the first part. Labels with at least
/// two examples contribute to both parts.
pub fn stratified_split<R: Rng + ?Sized>(labels: &[&str], frac: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for idx in by_label.values_mut() {
        idx.shuffle(rng);
        let n = idx.len();
        let mut k = (n as f64 * frac).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        a.extend_from_slice(&idx[..k.min(n)]);
        b.extend_from_slice(&idx[k.min(n)..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub model: TaskModel,
    pub selected: GridCell,
    pub grid_scores: Vec<(GridCell, f64)>,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub record: RunRecord,
}

/// Sentence-level micro-F1 of a classifier.
pub fn classify_accuracy(model: &TaskModel, vocab: &Vocabulary, data: &[LabeledSentence], max_len: usize) -> Result<f64> {
    let pred: Vec<String> = data
        .iter()
        .map(|s| model.predict_label(&s.text, vocab, max_len))
        .collect::<Result<_>>()?;
    let gold: Vec<&str> = data.iter().map(|s| s.label.as_str()).collect();
    let pred: Vec<&str> = pred.iter().map(String::as_str).collect();
    sentence_micro_f1(&gold, &pred)
}

/// Splits `data` 80/20 into train/test (stratified), carves an equally
/// stratified 80/20 dev split from the train part, grid-searches batch size
/// and epoch count on dev, and reports test accuracy of the selected model.
pub fn finetune_classify(
    mut encoder: Encoder32,
    vocab: &Vocabulary,
    data: &[LabeledSentence],
    cfg: &TrainConfig,
    grid: &ClassifyGrid,
) -> Result<ClassifyOutcome> {
    cfg.validate()?;
    let labels = label_set(data.iter().map(|s| s.label.as_str()));
    if labels.len() < 2 {
        return Err(Error::Data(format!("classification needs at least 2 classes, found {}", labels.len())));
    }
    let started = Instant::now();
    let mut rng = stage_rng(cfg.seed, "finetune-classify");
    prepare_encoder(&mut encoder, cfg, &mut rng)?;
    let all_labels: Vec<&str> = data.iter().map(|s| s.label.as_str()).collect();
    let (train_all, test) = stratified_split(&all_labels, 0.8, &mut rng);
    let train_labels: Vec<&str> = train_all.iter().map(|&i| all_labels[i]).collect();
    let (tr, dv) = stratified_split(&train_labels, 0.8, &mut rng);
    let pick = |idx: &[usize], base: &[usize]| -> Vec<LabeledSentence> { idx.iter().map(|&i| data[base[i]].clone()).collect() };
    let identity: Vec<usize> = (0..data.len()).collect();
    let train = pick(&tr, &train_all);
    let dev = pick(&dv, &train_all);
    let test = pick(&test, &identity);
    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(Error::Data("classification dataset too small to split".into()));
    }

    let template = TaskModel::new(Task::Classify, encoder, labels, &mut rng);
    let examples: Vec<Example> = train
        .iter()
        .map(|s| template.classify_example(s, vocab, cfg.max_seq_len))
        .collect::<Result<_>>()?;
    let cells = grid.cells();
    let mut best: Option<(f64, TaskModel, RunRecord)> = None;
    let (best_idx, scores) = grid_search(&cells, |cell| {
        let mut m = template.clone();
        let mut cell_rng = stage_rng(cfg.seed, &format!("classify/{}x{}", cell.batch, cell.epochs));
        let mut record = RunRecord {
            seed: cfg.seed,
            ..Default::default()
        };
        m.train(
            &examples,
            cfg,
            cell.batch,
            micro_for(cfg, cell.batch),
            cell.epochs,
            &mut cell_rng,
            &mut record,
            |_, _| Ok(true),
        )?;
        let acc = classify_accuracy(&m, vocab, &dev, cfg.max_seq_len)?;
        log::debug!("classify grid {}x{}: dev {acc:.4}", cell.batch, cell.epochs);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, m, record));
        }
        Ok(acc)
    })?;
    let (dev_accuracy, model, mut record) = best.expect("non-empty grid");
    let test_accuracy = classify_accuracy(&model, vocab, &test, cfg.max_seq_len)?;
    record.best_dev = Some(dev_accuracy);
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(ClassifyOutcome {
        model,
        selected: cells[best_idx],
        grid_scores: cells.iter().copied().zip(scores).collect(),
        dev_accuracy,
        test_accuracy,
        record,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub seed: u64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: Vec<SeedMetric>,
    pub mean: f64,
}

/// Runs `run` once per seed and averages the resulting metrics.
pub fn repeat_runs<F>(seeds: &[u64], mut run: F) -> Result<RepeatSummary>
where
    F: FnMut(u64) -> Result<f64>,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let runs: Vec<SeedMetric> = seeds
        .iter()
        .map(|&seed| run(seed).map(|metric| SeedMetric { seed, metric }))
        .collect::<Result<_>>()?;
    let mean = runs.iter().map(|r| r.metric).sum::<f64>() / runs.len() as f64;
    Ok(RepeatSummary { runs, mean })
}

/// Fingerprint of the frozen base tensors.
pub fn base_fingerprint(enc: &Encoder32) -> String {
    enc.weights.fingerprint(|g| g == Group::Base)
}
