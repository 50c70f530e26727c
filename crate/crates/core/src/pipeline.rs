//! End-to-end runs over a fixture (or real) directory: base pretraining,
//! corpus composition per strategy, continued pretraining, fine-tuning and
//! evaluation, summarized as a task-by-model table.
//!
//! Expected layout of the data directory (as written by
//! [`crate::fixtures::generate_fixtures`]):
//!
//! ```text
//! vocab.txt
//! pools/general-multilingual.jsonl
//! pools/{domain}/domain-multilingual.jsonl
//! pools/{domain}/domain-english.jsonl
//! heldout/{domain}.jsonl
//! ner/{domain}/{train,dev,test}.conll
//! clf/{domain}.jsonl
//! retrieval/{source,target}.jsonl, retrieval/gold.tsv
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::{compose, stage_rng, CompositionSpec, CorpusManifest, PoolKind, Pools, Strategy};
use crate::config::Profile;
use crate::datasets::{read_alignment, read_classification, read_conll, read_id_sentences, IdSentence};
use crate::encoder::{save_checkpoint, Checkpoint, CheckpointKind, Encoder32, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{aligned_table, mean_pool, pooling_mask, precision_curve, Embedded};
use crate::ingest::{read_corpus, SentenceRecord};
use crate::tokenizer::{encode, Vocabulary};
use crate::training::{
    finetune_classify, finetune_ner, heldout_mlm_loss, ner_span_f1, pretrain_mlm, repeat_runs, RepeatSummary,
    RunRecord, TrainMode,
};

pub const BASE: &str = "base";

/// Reads a pretraining pool, failing on the first malformed line.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SentenceRecord>> {
    read_corpus(path, None, "")?.collect()
}

/// The three composition pools of `domain` below a data directory.
pub fn load_pools(dir: &Path, domain: &str) -> Result<Pools> {
    let mut pools = Pools::default();
    pools.insert(
        PoolKind::DomainMultilingual,
        read_records(dir.join(format!("pools/{domain}/domain-multilingual.jsonl")))?,
    );
    pools.insert(
        PoolKind::DomainEnglish,
        read_records(dir.join(format!("pools/{domain}/domain-english.jsonl")))?,
    );
    pools.insert(
        PoolKind::GeneralMultilingual,
        read_records(dir.join("pools/general-multilingual.jsonl"))?,
    );
    Ok(pools)
}

pub fn encode_corpus(records: &[SentenceRecord], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<u32>> {
    records.iter().map(|r| encode(&r.text, vocab, max_len).subtoken_ids).collect()
}

/// A randomly initialized encoder of the profile's shape over `vocab`.
pub fn init_encoder(config: &EncoderConfig, vocab: &Vocabulary, seed: u64) -> Result<Encoder32> {
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        ..config.clone()
    };
    Encoder32::new(config, &mut stage_rng(seed, "init"))
}

/// Mean-pooled final-layer vectors of each sentence.
pub fn embed_sentences(
    encoder: &Encoder32,
    vocab: &Vocabulary,
    sentences: &[IdSentence],
    max_len: usize,
    include_specials: bool,
) -> Result<Vec<Embedded>> {
    let max_len = max_len.min(encoder.config.max_seq_len);
    sentences
        .iter()
        .map(|s| {
            let ids = encode(&s.text, vocab, max_len).subtoken_ids;
            let fwd = encoder.forward(&ids)?;
            let v = mean_pool(fwd.last_hidden(), &pooling_mask(&ids, include_specials))?;
            Ok(Embedded {
                id: s.id.clone(),
                vector: v.iter().map(|&x| x as f64).collect(),
            })
        })
        .collect()
}

/// Retrieval inputs: sources, targets and gold pairs.
#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub sources: Vec<IdSentence>,
    pub targets: Vec<IdSentence>,
    pub gold: Vec<(String, String)>,
}

impl RetrievalSet {
    pub fn load(source: &Path, target: &Path, gold: &Path) -> Result<Self> {
        Ok(Self {
            sources: read_id_sentences(source)?,
            targets: read_id_sentences(target)?,
            gold: read_alignment(gold)?,
        })
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join("source.jsonl"), &dir.join("target.jsonl"), &dir.join("gold.tsv"))
    }

    /// Precision at each of `ks` under `encoder`.
    pub fn precision(&self, encoder: &Encoder32, vocab: &Vocabulary, max_len: usize, ks: &[usize]) -> Result<Vec<f64>> {
        let src = embed_sentences(encoder, vocab, &self.sources, max_len, true)?;
        let tgt = embed_sentences(encoder, vocab, &self.targets, max_len, true)?;
        precision_curve(&src, &tgt, &self.gold, ks)
    }
}

/// Which strategies and training mode a pipeline run covers.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub strategies: Vec<Strategy>,
    pub mode: TrainMode,
    pub domains: Vec<String>,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            mode: TrainMode::Full,
            domains: crate::fixtures::DOMAINS.iter().map(|d| d.to_string()).collect(),
            seed: 0,
        }
    }
}

/// Metrics of one model on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub heldout_mlm_loss: f64,
    pub ner_f1: RepeatSummary,
    pub clf_accuracy: RepeatSummary,
}

/// Every number a pipeline run produces; deterministic for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub profile: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub finetune_seeds: Vec<u64>,
    /// Column order: `base` then the strategies that were run.
    pub models: Vec<String>,
    /// `metrics[domain][model]`
    pub metrics: BTreeMap<String, BTreeMap<String, ModelMetrics>>,
    /// Precision@1 of retrieval per model; `random-init` is the untrained
    /// encoder, domain models are keyed `{domain}/{model}`.
    pub retrieval_p1: BTreeMap<String, f64>,
    /// Manifest hashes, keyed `{domain}/{strategy}`.
    pub manifests: BTreeMap<String, String>,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Rows are tasks, columns the base model and the three strategies;
    /// strategies that were not run show `-`.
    pub fn summary_table(&self) -> String {
        let columns: Vec<String> = std::iter::once(BASE.to_owned())
            .chain(Strategy::ALL.iter().map(|s| s.as_str().to_owned()))
            .collect();
        let mut header = vec!["task".to_owned(), BASE.to_owned()];
        header.extend(Strategy::ALL.iter().map(|s| s.label().to_owned()));
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{:.2}", 100.0 * v));
        let mut rows = Vec::new();
        for (dom, by_model) in &self.metrics {
            let mut ner = vec![format!("{dom} ner")];
            let mut clf = vec![format!("{dom} clf")];
            let mut mlm = vec![format!("{dom} mlm-loss")];
            for c in &columns {
                let m = by_model.get(c);
                ner.push(cell(m.map(|m| m.ner_f1.mean)));
                clf.push(cell(m.map(|m| m.clf_accuracy.mean)));
                mlm.push(m.map_or_else(|| "-".to_owned(), |m| format!("{:.3}", m.heldout_mlm_loss)));
            }
            rows.extend([ner, clf, mlm]);
        }
        if !self.retrieval_p1.is_empty() {
            let mut r = vec!["retrieval p@1".to_owned()];
            for c in &columns {
                let key = if c == BASE { BASE.to_owned() } else { format!("bio/{c}") };
                r.push(cell(self.retrieval_p1.get(&key).copied()));
            }
            rows.push(r);
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut out = aligned_table(&header, &rows);
        if let Some(p) = self.retrieval_p1.get("random-init") {
            out.push_str(&format!("random-init retrieval p@1: {:.2}\n", 100.0 * p));
        }
        out
    }
}

fn stage<T>(name: impl Into<String>, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(record).expect("serializable") + "\n"))
}

/// Pretrains the stand-in base model on the general pool and saves it as
/// `out/base.ckpt`.
pub fn base_model(profile: &Profile, data: &Path, vocab: &Vocabulary, seed: u64, out: &Path) -> Result<Encoder32> {
    let path = out.join("base.ckpt");
    let general = read_records(data.join("pools/general-multilingual.jsonl"))?;
    let corpus = encode_corpus(&general, vocab, profile.base_pretrain.max_seq_len);
    let init = init_encoder(&profile.encoder, vocab, seed)?;
    let cfg = crate::training::TrainConfig {
        seed,
        ..profile.base_pretrain.clone()
    };
    let (enc, record) = pretrain_mlm(init, &corpus, &cfg, &profile.masking, None)?;
    save_checkpoint(&path, &Checkpoint::from_encoder(&enc, CheckpointKind::Full))?;
    write_record(&out.join("base.run.json"), &record)?;
    Ok(enc)
}

/// Continued pretraining of `base` on a composed corpus.
pub fn adapt(
    profile: &Profile,
    base: &Encoder32,
    records: &[SentenceRecord],
    vocab: &Vocabulary,
    mode: TrainMode,
    seed: u64,
) -> Result<(Encoder32, RunRecord)> {
    let cfg = crate::training::TrainConfig {
        seed,
        ..profile.pretrain(mode).clone()
    };
    let corpus = encode_corpus(records, vocab, cfg.max_seq_len);
    pretrain_mlm(base.clone(), &corpus, &cfg, &profile.masking, None)
}

/// Fine-tunes and evaluates `encoder` on a domain's tagging and
/// classification data, once per seed.
pub fn evaluate_model(
    profile: &Profile,
    encoder: &Encoder32,
    data: &Path,
    domain: &str,
    vocab: &Vocabulary,
    mode: TrainMode,
    seeds: &[u64],
) -> Result<ModelMetrics> {
    let held = read_records(data.join(format!("heldout/{domain}.jsonl")))?;
    let held = encode_corpus(&held, vocab, profile.pretrain(mode).max_seq_len);
    let heldout_mlm_loss = heldout_mlm_loss(encoder, &held, &profile.masking, 0)?;

    let ner_dir = data.join(format!("ner/{domain}"));
    let train = read_conll(ner_dir.join("train.conll"))?;
    let dev = read_conll(ner_dir.join("dev.conll"))?;
    let test = read_conll(ner_dir.join("test.conll"))?;
    let ner_cfg = profile.ner(mode);
    let ner_f1 = repeat_runs(seeds, |seed| {
        let cfg = crate::training::TrainConfig {
            seed,
            ..ner_cfg.clone()
        };
        let out = finetune_ner(encoder.clone(), vocab, &train, &dev, &cfg)?;
        ner_span_f1(&out.model, vocab, &test, cfg.max_seq_len)
    })?;

    let clf = read_classification(data.join(format!("clf/{domain}.jsonl")))?;
    let clf_cfg = profile.classify(mode);
    let clf_accuracy = repeat_runs(seeds, |seed| {
        let cfg = crate::training::TrainConfig {
            seed,
            ..clf_cfg.clone()
        };
        Ok(finetune_classify(encoder.clone(), vocab, &clf, &cfg, &profile.classify_grid)?.test_accuracy)
    })?;
    Ok(ModelMetrics {
        heldout_mlm_loss,
        ner_f1,
        clf_accuracy,
    })
}

/// Runs the whole pipeline, writing manifests, checkpoints, run records,
/// `metrics.json` and `summary.txt` below `out`.
pub fn run_pipeline(profile: &Profile, data: &Path, out: &Path, opts: &PipelineOptions) -> Result<PipelineReport> {
    profile.validate()?;
    mkdir(out)?;
    let vocab = stage("vocab", Vocabulary::load(data.join("vocab.txt")))?;
    let seeds = profile.seeds.clone();
    let base = stage("base-pretrain", base_model(profile, data, &vocab, opts.seed, out))?;

    let mut report = PipelineReport {
        profile: profile.name.clone(),
        mode: opts.mode,
        seed: opts.seed,
        finetune_seeds: seeds.clone(),
        models: std::iter::once(BASE.to_owned())
            .chain(opts.strategies.iter().map(|s| s.as_str().to_owned()))
            .collect(),
        metrics: BTreeMap::new(),
        retrieval_p1: BTreeMap::new(),
        manifests: BTreeMap::new(),
    };

    let retrieval_dir = data.join("retrieval");
    let retrieval = if retrieval_dir.join("gold.tsv").exists() {
        Some(stage("retrieval-load", RetrievalSet::load_dir(&retrieval_dir))?)
    } else {
        None
    };
    let max_len = profile.encoder.max_seq_len;
    if let Some(r) = &retrieval {
        let random = stage("random-init", init_encoder(&profile.encoder, &vocab, opts.seed))?;
        report
            .retrieval_p1
            .insert("random-init".into(), stage("retrieve", r.precision(&random, &vocab, max_len, &[1]))?[0]);
        report
            .retrieval_p1
            .insert(BASE.into(), stage("retrieve", r.precision(&base, &vocab, max_len, &[1]))?[0]);
    }

    for domain in &opts.domains {
        let dom_dir = out.join(domain);
        mkdir(&dom_dir)?;
        let pools = stage(format!("{domain}/load-pools"), load_pools(data, domain))?;
        let mut by_model = BTreeMap::new();
        log::info!("{domain}: evaluating base");
        by_model.insert(
            BASE.to_owned(),
            stage(
                format!("{domain}/base/evaluate"),
                evaluate_model(profile, &base, data, domain, &vocab, opts.mode, &seeds),
            )?,
        );
        for &strategy in &opts.strategies {
            let name = strategy.as_str();
            let at = |s: &str| format!("{domain}/{name}/{s}");
            let spec = CompositionSpec {
                alpha: profile.alpha,
                ..CompositionSpec::new(strategy, profile.budget, opts.seed)
            };
            let manifest: CorpusManifest = stage(at("compose"), compose(&spec, &pools))?;
            manifest.save(dom_dir.join(format!("{name}.manifest.json")))?;
            report.manifests.insert(format!("{domain}/{name}"), manifest.hash.clone());
            let records = stage(at("resolve"), pools.resolve_all(&manifest))?;
            log::info!("{domain}/{name}: pretraining on {} sentences", records.len());
            let (enc, record) = stage(at("pretrain"), adapt(profile, &base, &records, &vocab, opts.mode, opts.seed))?;
            let kind = match opts.mode {
                TrainMode::Full => CheckpointKind::Full,
                TrainMode::Adapter => CheckpointKind::Adapters,
            };
            save_checkpoint(dom_dir.join(format!("{name}.ckpt")), &Checkpoint::from_encoder(&enc, kind))?;
            write_record(&dom_dir.join(format!("{name}.run.json")), &record)?;
            log::info!("{domain}/{name}: evaluating");
            by_model.insert(
                name.to_owned(),
                stage(at("evaluate"), evaluate_model(profile, &enc, data, domain, &vocab, opts.mode, &seeds))?,
            );
            if let (Some(r), "bio") = (&retrieval, domain.as_str()) {
                let p = stage(at("retrieve"), r.precision(&enc, &vocab, max_len, &[1]))?[0];
                report.retrieval_p1.insert(format!("{domain}/{name}"), p);
            }
        }
        report.metrics.insert(domain.clone(), by_model);
    }
    write(&out.join("metrics.json"), &report.to_json())?;
    write(&out.join("summary.txt"), &report.summary_table())?;
    Ok(report)
}

/// Loads an encoder checkpoint; adapter-only checkpoints are applied on top
/// of the full checkpoint at `base`.
pub fn load_encoder(path: &Path, base: Option<&Path>) -> Result<Encoder32> {
    let ck = crate::encoder::load_checkpoint(path)?;
    match ck.kind {
        CheckpointKind::Full => ck.to_encoder(),
        CheckpointKind::Adapters => {
            let base = base.ok_or_else(|| {
                Error::Config(format!("{} holds adapters only; pass the base checkpoint too", path.display()))
            })?;
            let mut enc: Encoder32 = crate::encoder::load_checkpoint(base)?.to_encoder()?;
            ck.apply_adapters(&mut enc)?;
            enc.trainable = ck.trainable;
            Ok(enc)
        }
    }
}
