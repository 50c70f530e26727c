//! `mdapt` command-line front end.
//!
//! Exit codes: 0 success, 1 data error, 2 usage or configuration error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mdapt::compose::{compose, manifest_report, CompositionSpec, PoolKind, Pools, Strategy};
use mdapt::config::Profile;
use mdapt::datasets::{read_classification, read_conll, read_id_sentences};
use mdapt::encoder::{save_checkpoint, Checkpoint, CheckpointKind};
use mdapt::eval::{
    bio_decode_all, cross_domain_report, precision_curve, sentence_micro_f1, span_micro_f1, BioMode, Embedded,
};
use mdapt::fixtures::generate_fixtures;
use mdapt::ingest::write_corpus;
use mdapt::pipeline::{
    embed_sentences, encode_corpus, init_encoder, load_encoder, load_pools, read_records, run_pipeline,
    PipelineOptions, RetrievalSet,
};
use mdapt::tokenizer::{build_vocab, tokenizer_gap_report, Vocabulary};
use mdapt::training::{
    finetune_classify, finetune_ner, ner_span_f1, pretrain_mlm, TrainConfig, TrainMode,
};
use mdapt::{Encoder32, Error, Result};

#[derive(Parser)]
#[command(name = "mdapt", version, about = "Multilingual domain-adaptive pretraining toolkit")]
struct Cli {
    /// Config file (TOML with `format_version`) overriding the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileName::Desk)]
    profile: ProfileName,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileName {
    Paper,
    Desk,
}

impl ProfileName {
    fn as_str(self) -> &'static str {
        match self {
            ProfileName::Paper => "paper",
            ProfileName::Desk => "desk",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Ner,
    Clf,
}

#[derive(Subcommand)]
enum Command {
    /// Compose a budgeted pretraining corpus from the three pools.
    Compose(ComposeArgs),
    /// Build a subword vocabulary from a corpus.
    Vocab(VocabArgs),
    /// Continued-word fractions of two vocabularies on two corpora.
    Tokstats(TokstatsArgs),
    /// Masked-LM pretraining (from scratch or continued).
    Pretrain(PretrainArgs),
    /// Fine-tune a BIO tagger.
    FinetuneNer(FinetuneNerArgs),
    /// Fine-tune a sentence classifier with grid search.
    FinetuneClf(FinetuneClfArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Cross-lingual sentence retrieval precision@k.
    Retrieve(RetrieveArgs),
    /// Compare several pretrained models on one downstream task.
    CrossDomain(CrossDomainArgs),
    /// Generate synthetic fixture data.
    Fixtures(FixturesArgs),
    /// Run the end-to-end pipeline.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct PoolArgs {
    /// Fixture-layout data directory (with `--domain`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    /// `kind=path` pool files added to the pools, where kind is
    /// domain-multilingual, domain-english or general-multilingual.
    #[arg(long = "pool")]
    pools: Vec<String>,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(flatten)]
    pools: PoolArgs,
    #[arg(long)]
    strategy: Strategy,
    /// Sentence budget (defaults to the profile's).
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct VocabArgs {
    /// JSON-lines corpus files.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    size: usize,
}

#[derive(Args)]
struct TokstatsArgs {
    #[arg(long)]
    vocab_a: PathBuf,
    #[arg(long)]
    vocab_b: PathBuf,
    /// General-domain JSON-lines corpus.
    #[arg(long)]
    general: PathBuf,
    /// Specific-domain JSON-lines corpus.
    #[arg(long)]
    specific: PathBuf,
    /// Skip words without alphanumeric characters.
    #[arg(long)]
    exclude_punct: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Encoder checkpoint; omit to start from random initialization.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Full checkpoint that an adapter-only `--model` applies to.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// JSON-lines corpus files (e.g. the `corpus.jsonl` written by compose).
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value = "full")]
    mode: TrainMode,
    /// Optimizer steps (defaults to the profile's).
    #[arg(long)]
    steps: Option<u64>,
    /// Pretrain the general-domain base model with the base settings.
    #[arg(long)]
    base_settings: bool,
}

#[derive(Args)]
struct FinetuneNerArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    mode: TrainMode,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FinetuneClfArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// JSON-lines `{text, label}` file, split 80/20 internally.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "full")]
    mode: TrainMode,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Strict BIO decoding: drop `I-` tags that do not continue a span.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    /// JSON-lines `{id, text}` sources, or `{id, vector}` with `--vectors`.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// `src_id<TAB>tgt_id` alignment.
    #[arg(long)]
    gold: PathBuf,
    /// Inputs already hold embeddings.
    #[arg(long)]
    vectors: bool,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Embed with a randomly initialized encoder of the profile's shape.
    #[arg(long)]
    random_init: bool,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    /// Leave `[CLS]`/`[SEP]` out of mean pooling.
    #[arg(long)]
    exclude_specials: bool,
}

#[derive(Args)]
struct CrossDomainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// `name=checkpoint` pairs, e.g. `in-domain=bio.ckpt`.
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<String>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Fixture-layout data directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    domain: String,
    #[arg(long, default_value = "full")]
    mode: TrainMode,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    languages: Option<usize>,
    #[arg(long)]
    parallel_pairs: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Fixture-layout data directory; generated under the output directory
    /// when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Strategies to run (all when omitted).
    #[arg(long, num_args = 1..)]
    strategy: Vec<Strategy>,
    #[arg(long, default_value = "full")]
    mode: TrainMode,
    /// Domains to run (all fixture domains when omitted).
    #[arg(long, num_args = 1..)]
    domain: Vec<String>,
}

struct Ctx {
    profile: Profile,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn texts(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records(p)?.into_iter().map(|r| r.text));
    }
    Ok(out)
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

fn encoder_from(ctx: &Ctx, m: &ModelArgs, vocab: &Vocabulary) -> Result<Encoder32> {
    let enc = match &m.model {
        Some(p) => load_encoder(p, m.base.as_deref())?,
        None => init_encoder(&ctx.profile.encoder, vocab, ctx.seed())?,
    };
    if enc.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} differs from the vocabulary's {}",
            enc.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(enc)
}

fn checkpoint_kind(mode: TrainMode) -> CheckpointKind {
    match mode {
        TrainMode::Full => CheckpointKind::Full,
        TrainMode::Adapter => CheckpointKind::Adapters,
    }
}

fn cmd_compose(ctx: &Ctx, a: ComposeArgs) -> Result<()> {
    let p = &a.pools;
    let mut pools = match (&p.data, &p.domain) {
        (Some(d), Some(dom)) => load_pools(d, dom)?,
        (Some(_), None) => return Err(Error::Config("--data needs --domain".into())),
        _ => Pools::default(),
    };
    for spec in &p.pools {
        let (kind, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--pool expects kind=path, got `{spec}`")))?;
        pools.insert(kind.parse::<PoolKind>()?, read_records(Path::new(path))?);
    }
    let spec = CompositionSpec {
        alpha: a.alpha.unwrap_or(ctx.profile.alpha),
        ..CompositionSpec::new(a.strategy, a.budget.unwrap_or(ctx.profile.budget), ctx.seed())
    };
    let manifest = compose(&spec, &pools)?;
    let out = ctx.out("compose")?;
    manifest.save(out.join("manifest.json"))?;
    write_corpus(out.join("corpus.jsonl"), &pools.resolve_all(&manifest)?)?;
    print!("{}", manifest_report(&manifest));
    println!("manifest hash {}", manifest.hash);
    Ok(())
}

fn cmd_vocab(ctx: &Ctx, a: VocabArgs) -> Result<()> {
    let vocab = build_vocab(&texts(&a.corpus)?, a.size)?;
    let out = ctx.out("vocab")?;
    vocab.save(out.join("vocab.txt"))?;
    println!("{} tokens written to {}", vocab.len(), out.join("vocab.txt").display());
    Ok(())
}

fn cmd_tokstats(ctx: &Ctx, a: TokstatsArgs) -> Result<()> {
    let report = tokenizer_gap_report(
        &Vocabulary::load(&a.vocab_a)?,
        &Vocabulary::load(&a.vocab_b)?,
        &texts(&[a.general])?,
        &texts(&[a.specific])?,
        a.exclude_punct,
    )?;
    let out = ctx.out("tokstats")?;
    write_json(&out.join("tokstats.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.model.vocab)?;
    let enc = encoder_from(ctx, &a.model, &vocab)?;
    let mut cfg = if a.base_settings {
        ctx.profile.base_pretrain.clone()
    } else {
        ctx.profile.pretrain(a.mode).clone()
    };
    cfg.mode = a.mode;
    cfg.seed = ctx.seed();
    if let Some(s) = a.steps {
        cfg.max_steps = s;
    }
    let mut records = Vec::new();
    for p in &a.corpus {
        records.extend(read_records(p)?);
    }
    let corpus = encode_corpus(&records, &vocab, cfg.max_seq_len);
    let out = ctx.out("pretrain")?;
    let last_good = out.join("last-good.ckpt");
    let (enc, mut record) = pretrain_mlm(enc, &corpus, &cfg, &ctx.profile.masking, Some(&last_good))?;
    let path = out.join("model.ckpt");
    save_checkpoint(&path, &Checkpoint::from_encoder(&enc, checkpoint_kind(a.mode)))?;
    record.checkpoint = Some(path.display().to_string());
    write_json(&out.join("run.json"), &record)?;
    println!(
        "{} steps, loss {:.4} -> {:.4}; checkpoint {}",
        record.steps,
        record.losses.first().copied().unwrap_or(f64::NAN),
        record.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FinetuneMetrics {
    dev: Option<f64>,
    test: Option<f64>,
    epochs_run: Option<usize>,
    selected: Option<mdapt::training::GridCell>,
}

fn cmd_finetune_ner(ctx: &Ctx, a: FinetuneNerArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.model.vocab)?;
    let enc = encoder_from(ctx, &a.model, &vocab)?;
    let mut cfg = with_seed(ctx.profile.ner(a.mode), ctx.seed());
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    let train = read_conll(&a.train)?;
    let dev = read_conll(&a.dev)?;
    let outcome = finetune_ner(enc, &vocab, &train, &dev, &cfg)?;
    let test = match &a.test {
        Some(p) => Some(ner_span_f1(&outcome.model, &vocab, &read_conll(p)?, cfg.max_seq_len)?),
        None => None,
    };
    let out = ctx.out("finetune-ner")?;
    let path = out.join("tagger.ckpt");
    save_checkpoint(&path, &outcome.model.to_checkpoint(checkpoint_kind(a.mode)))?;
    let mut record = outcome.record;
    record.checkpoint = Some(path.display().to_string());
    write_json(&out.join("run.json"), &record)?;
    let metrics = FinetuneMetrics {
        dev: record.best_dev,
        test,
        epochs_run: Some(outcome.epochs_run),
        selected: None,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string(&metrics).expect("serializable"));
    Ok(())
}

fn cmd_finetune_clf(ctx: &Ctx, a: FinetuneClfArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.model.vocab)?;
    let enc = encoder_from(ctx, &a.model, &vocab)?;
    let cfg = with_seed(ctx.profile.classify(a.mode), ctx.seed());
    let data = read_classification(&a.data)?;
    let outcome = finetune_classify(enc, &vocab, &data, &cfg, &ctx.profile.classify_grid)?;
    let out = ctx.out("finetune-clf")?;
    let path = out.join("classifier.ckpt");
    save_checkpoint(&path, &outcome.model.to_checkpoint(checkpoint_kind(a.mode)))?;
    let mut record = outcome.record;
    record.checkpoint = Some(path.display().to_string());
    write_json(&out.join("run.json"), &record)?;
    let metrics = FinetuneMetrics {
        dev: Some(outcome.dev_accuracy),
        test: Some(outcome.test_accuracy),
        epochs_run: None,
        selected: Some(outcome.selected),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string(&metrics).expect("serializable"));
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    task: &'static str,
    precision: f64,
    recall: f64,
    f1: f64,
    items: usize,
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let report = match a.task {
        TaskArg::Ner => {
            let gold = read_conll(&a.gold)?;
            let pred = read_conll(&a.pred)?;
            if gold.len() != pred.len() {
                return Err(Error::Data(format!(
                    "gold has {} sentences, predictions {}",
                    gold.len(),
                    pred.len()
                )));
            }
            for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
                if g.words.len() != p.words.len() {
                    return Err(Error::Data(format!("sentence {} differs in length", i + 1)));
                }
            }
            let mode = if a.strict { BioMode::Strict } else { BioMode::Lenient };
            let tags = |d: &[mdapt::datasets::NerSentence]| d.iter().map(|s| s.tags.clone()).collect::<Vec<_>>();
            let g = bio_decode_all(&tags(&gold), mode)?;
            let p = bio_decode_all(&tags(&pred), mode)?;
            let s = span_micro_f1(&g, &p);
            EvalReport {
                task: "ner",
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                items: gold.len(),
            }
        }
        TaskArg::Clf => {
            let gold = read_classification(&a.gold)?;
            let pred = read_classification(&a.pred)?;
            let g: Vec<&str> = gold.iter().map(|s| s.label.as_str()).collect();
            let p: Vec<&str> = pred.iter().map(|s| s.label.as_str()).collect();
            let f1 = sentence_micro_f1(&g, &p)?;
            EvalReport {
                task: "clf",
                precision: f1,
                recall: f1,
                f1,
                items: gold.len(),
            }
        }
    };
    let out = ctx.out("eval")?;
    write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

fn read_vectors(path: &Path) -> Result<Vec<Embedded>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct RetrievalReport {
    pairs: usize,
    precision_at: Vec<(usize, f64)>,
}

fn cmd_retrieve(ctx: &Ctx, a: RetrieveArgs) -> Result<()> {
    let gold = mdapt::datasets::read_alignment(&a.gold)?;
    let (src, tgt) = if a.vectors {
        (read_vectors(&a.source)?, read_vectors(&a.target)?)
    } else {
        let vocab_path = a
            .vocab
            .as_ref()
            .ok_or_else(|| Error::Config("text inputs need --vocab".into()))?;
        let vocab = Vocabulary::load(vocab_path)?;
        let enc = match (&a.model, a.random_init) {
            (Some(p), false) => load_encoder(p, a.base.as_deref())?,
            (None, true) => init_encoder(&ctx.profile.encoder, &vocab, ctx.seed())?,
            _ => return Err(Error::Config("pass exactly one of --model and --random-init".into())),
        };
        let max_len = enc.config.max_seq_len;
        let set = RetrievalSet {
            sources: read_id_sentences(&a.source)?,
            targets: read_id_sentences(&a.target)?,
            gold: gold.clone(),
        };
        (
            embed_sentences(&enc, &vocab, &set.sources, max_len, !a.exclude_specials)?,
            embed_sentences(&enc, &vocab, &set.targets, max_len, !a.exclude_specials)?,
        )
    };
    let curve = precision_curve(&src, &tgt, &gold, &a.k)?;
    let report = RetrievalReport {
        pairs: gold.len(),
        precision_at: a.k.iter().copied().zip(curve).collect(),
    };
    let out = ctx.out("retrieve")?;
    write_json(&out.join("retrieval.json"), &report)?;
    for (k, p) in &report.precision_at {
        println!("P@{k} {p:.4}");
    }
    Ok(())
}

fn cmd_cross_domain(ctx: &Ctx, a: CrossDomainArgs) -> Result<bool> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let seed = ctx.seed();
    let mut results = Vec::new();
    for spec in &a.models {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--model expects name=path, got `{spec}`")))?;
        let metric = (|| -> Result<f64> {
            let enc = load_encoder(Path::new(path), a.base.as_deref())?;
            match a.task {
                TaskArg::Ner => {
                    let dir = a.data.join(format!("ner/{}", a.domain));
                    let cfg = with_seed(ctx.profile.ner(a.mode), seed);
                    let o = finetune_ner(enc, &vocab, &read_conll(dir.join("train.conll"))?, &read_conll(dir.join("dev.conll"))?, &cfg)?;
                    ner_span_f1(&o.model, &vocab, &read_conll(dir.join("test.conll"))?, cfg.max_seq_len)
                }
                TaskArg::Clf => {
                    let data = read_classification(a.data.join(format!("clf/{}.jsonl", a.domain)))?;
                    let cfg = with_seed(ctx.profile.classify(a.mode), seed);
                    Ok(finetune_classify(enc, &vocab, &data, &cfg, &ctx.profile.classify_grid)?.test_accuracy)
                }
            }
        })();
        if let Err(e) = &metric {
            log::error!("{name}: {e}");
        }
        results.push((name.to_owned(), metric));
    }
    let (task, metric) = match a.task {
        TaskArg::Ner => ("ner", "span-f1"),
        TaskArg::Clf => ("clf", "accuracy"),
    };
    let report = cross_domain_report(&format!("{} {task}", a.domain), metric, results);
    let out = ctx.out("cross-domain")?;
    write_json(&out.join("cross-domain.json"), &report)?;
    print!("{}", report.to_table());
    Ok(!report.has_errors())
}

fn cmd_fixtures(ctx: &Ctx, a: FixturesArgs) -> Result<()> {
    let mut spec = ctx.profile.fixtures.clone();
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    if let Some(n) = a.languages {
        spec.num_languages = n;
    }
    if let Some(n) = a.parallel_pairs {
        spec.parallel_pairs = n;
    }
    let out = ctx.out("fixtures")?;
    generate_fixtures(&spec, &out)?;
    println!("fixtures written to {} ({})", out.display(), mdapt::fixtures::directory_hash(&out)?);
    Ok(())
}

fn cmd_pipeline(ctx: &Ctx, a: PipelineArgs) -> Result<()> {
    let out = ctx.out("runs/pipeline")?;
    let data = match a.data {
        Some(d) => d,
        None => {
            let d = out.join("fixtures");
            let mut spec = ctx.profile.fixtures.clone();
            if let Some(s) = ctx.seed {
                spec.seed = s;
            }
            generate_fixtures(&spec, &d).map_err(|e| e.in_stage("fixtures"))?;
            d
        }
    };
    let mut opts = PipelineOptions {
        mode: a.mode,
        seed: ctx.seed(),
        ..Default::default()
    };
    if !a.strategy.is_empty() {
        opts.strategies = a.strategy;
    }
    if !a.domain.is_empty() {
        opts.domains = a.domain;
    }
    let report = run_pipeline(&ctx.profile, &data, &out, &opts)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let profile = match &cli.config {
        Some(p) => Profile::load(p, cli.profile.as_str())?,
        None => Profile::named(cli.profile.as_str())?,
    };
    let ctx = Ctx {
        profile,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Compose(a) => cmd_compose(&ctx, a)?,
        Command::Vocab(a) => cmd_vocab(&ctx, a)?,
        Command::Tokstats(a) => cmd_tokstats(&ctx, a)?,
        Command::Pretrain(a) => cmd_pretrain(&ctx, a)?,
        Command::FinetuneNer(a) => cmd_finetune_ner(&ctx, a)?,
        Command::FinetuneClf(a) => cmd_finetune_clf(&ctx, a)?,
        Command::Eval(a) => cmd_eval(&ctx, a)?,
        Command::Retrieve(a) => cmd_retrieve(&ctx, a)?,
        Command::CrossDomain(a) => return cmd_cross_domain(&ctx, a),
        Command::Fixtures(a) => cmd_fixtures(&ctx, a)?,
        Command::Pipeline(a) => cmd_pipeline(&ctx, a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
