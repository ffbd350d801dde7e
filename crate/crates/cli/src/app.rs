//! Subcommands. Each one reads and writes the JSONL/JSON artifacts named by
//! its flags; flags take precedence over the config file.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lsap_core::ablations::{
    intent_overlap_report, lexical_overlap_report, remap_eval_labels, semantic_similarity_report,
    shuffle_pretrain_labels, BagOfWordsEncoder, LabelRemap, OverlapReport,
    DEFAULT_PER_INTENT_SAMPLE,
};
use lsap_core::backend::{HpOverride, Hyperparams, LookupBackend, Seq2SeqBackend};
use lsap_core::classifier::{BagOfWordsClassifier, LinearModel};
use lsap_core::config::PipelineConfig;
use lsap_core::corpus::{
    dedupe_against_eval, ingest_generic_jsonl, read_corpus, read_jsonl, write_corpus, write_jsonl,
    FieldMap, IngestOptions, LabeledExample, Quality,
};
use lsap_core::dialogue_filter::{
    apply_threshold, audit_precision, audit_sample, build_filter_training_set, score_utterances,
    train_intentfulness, Judgment, ThresholdPolicy,
};
use lsap_core::exec::Exec;
use lsap_core::formats::{format_corpus, FormatOptions, PretrainRecord, RecordFormat};
use lsap_core::intent_generator::{
    build_generator_training, novel_intent_rate, pseudo_label, train_generator,
};
use lsap_core::intent_text::{natural_label, IntentTextConfig, NaturalLabel};
use lsap_core::runner::{
    evaluate_ic, finetune, predict_intents, pretrain, run_experiment, Experiment, FinetuneFormat,
    FinetuneOptions, Trained,
};
use lsap_core::splits::{make_fewshot_splits_with, write_split_set};
use lsap_core::{Error, Result};
use lsap_seq2seq::{TinyConfig, TinySeq2Seq};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "lsap",
    version,
    about = "Label-semantic-aware pre-training toolkit"
)]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Model backend: `tiny` or `lookup`.
    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Run single-threaded.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw JSONL dump into the corpus schema.
    Ingest(IngestArgs),
    /// Drop corpus examples whose utterance occurs in an eval set.
    Dedupe(DedupeArgs),
    /// Train the intentfulness classifier.
    FilterTrain(FilterTrainArgs),
    /// Score utterances and keep the intentful ones.
    FilterApply(FilterApplyArgs),
    /// Draw the precision-audit sample, or score it given judgments.
    Audit(AuditArgs),
    /// Train the intent generator on gold and silver data.
    GenTrain(GenTrainArgs),
    /// Label filtered utterances with the intent generator.
    PseudoLabel(PseudoLabelArgs),
    /// Render training records.
    Format(FormatArgs),
    /// Write nested few-shot splits.
    Split(SplitArgs),
    /// Pre-train a model on formatted records.
    Pretrain(PretrainArgs),
    /// Fine-tune on one few-shot split.
    Finetune(FinetuneArgs),
    /// Predict and score intents on a test set.
    Eval(EvalArgs),
    /// Permute intent labels across a pre-training corpus.
    AblateShuffle(AblateShuffleArgs),
    /// Replace eval labels by a random derangement.
    AblateRemap(AblateRemapArgs),
    /// Pre-train/eval overlap analysis.
    Overlap(OverlapArgs),
    /// Run the full (seed x k) grid and write the report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "text")]
    pub utterance_key: String,
    #[arg(long)]
    pub intent_key: Option<String>,
    #[arg(long)]
    pub id_key: Option<String>,
    #[arg(long)]
    pub source: String,
    /// Tier for records that carry an intent.
    #[arg(long, default_value = "gold")]
    pub quality: Quality,
}

#[derive(Debug, Args)]
pub struct DedupeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Eval corpora; defaults to `paths.eval_sets`.
    #[arg(long = "eval")]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterTrainArgs {
    #[arg(long)]
    pub multidogo: Option<PathBuf>,
    #[arg(long)]
    pub sgd: Option<PathBuf>,
    /// Output classifier (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FilterApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `accept_all_positive`, `median_of_positives` or a fixed cutoff.
    #[arg(long)]
    pub policy: Option<String>,
    /// Also write every score here.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the sample here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSONL of `{"id", "intentful"}`; prints the precision.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTrainArgs {
    #[arg(long = "in", required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub model_dir: PathBuf,
    #[command(flatten)]
    pub hp: HpArgs,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator training corpora, for the novel-intent rate.
    #[arg(long = "known")]
    pub known: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FormatArgs {
    #[arg(long)]
    pub kind: Option<RecordFormat>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Training corpus; defaults to `paths.train`.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// One seed; defaults to `splits.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct HpArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl HpArgs {
    fn over(&self, base: HpOverride) -> HpOverride {
        HpOverride {
            learning_rate: self.learning_rate.or(base.learning_rate),
            batch_size: self.batch_size.or(base.batch_size),
            epochs: self.epochs.or(base.epochs),
            seed: self.seed.or(base.seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub model_dir: PathBuf,
    #[command(flatten)]
    pub hp: HpArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pre-trained model; fine-tunes a fresh model when absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub split: PathBuf,
    /// Split size, for the epoch schedule.
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub format: Option<FinetuneFormat>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_dir: PathBuf,
    /// Test corpus; defaults to `paths.test`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<FinetuneFormat>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateShuffleArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateRemapArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[arg(long)]
    pub pretrain: PathBuf,
    /// Eval corpus; defaults to `paths.test`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// One stopword per line.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory; defaults to `paths.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Skip pre-training even if `paths.pretrain_corpus` is set.
    #[arg(long)]
    pub no_pretrain: bool,
    /// Derangement seed for the misleading-label ablation.
    #[arg(long)]
    pub remap_seed: Option<u64>,
}

struct Ctx {
    cfg: PipelineConfig,
    backend: String,
    exec: Exec,
}

fn missing(key: &str, flag: &str) -> Error {
    Error::Config {
        key: key.into(),
        message: format!("not set; pass {flag} or set it in the config"),
    }
}

fn or_config(
    flag: Option<PathBuf>,
    config: &Option<PathBuf>,
    key: &str,
    name: &str,
) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| missing(key, name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => fs::create_dir_all(p).map_err(|e| io_error(p, e)),
        None => Ok(()),
    }
}

fn parse_policy(s: &str) -> Result<ThresholdPolicy> {
    match s {
        "accept_all_positive" => Ok(ThresholdPolicy::AcceptAllPositive),
        "median_of_positives" => Ok(ThresholdPolicy::MedianOfPositives),
        other => other
            .parse::<f64>()
            .map(ThresholdPolicy::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("unknown threshold policy `{other}`"))),
    }
}

/// A computation that runs against whichever backend is configured.
trait BackendTask {
    type Out;
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<Self::Out>;
}

fn dispatch<T: BackendTask>(ctx: &Ctx, task: T) -> Result<T::Out> {
    match ctx.backend.as_str() {
        "lookup" => task.run(&LookupBackend::new()),
        "tiny" => {
            let options = toml::Value::Table(ctx.cfg.backend.options.clone().into_iter().collect());
            let config: TinyConfig =
                options
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config {
                        key: "backend.options".into(),
                        message: e.message().to_string(),
                    })?;
            task.run(&TinySeq2Seq::new(config)?)
        }
        other => Err(Error::Config {
            key: "backend.kind".into(),
            message: format!("unknown backend `{other}` (expected `tiny` or `lookup`)"),
        }),
    }
}

fn labels_of(examples: &[LabeledExample], cfg: &IntentTextConfig) -> Result<Vec<NaturalLabel>> {
    examples
        .iter()
        .map(|e| natural_label(&e.intents, cfg))
        .collect()
}

fn finetune_options(ctx: &Ctx, format: Option<FinetuneFormat>) -> FinetuneOptions {
    let f = &ctx.cfg.finetune;
    FinetuneOptions {
        format: format.unwrap_or(f.format),
        schedule: f.schedule,
        learning_rate: f
            .learning_rate
            .unwrap_or(Hyperparams::FINETUNE.learning_rate),
        batch_size: f.batch_size.unwrap_or(Hyperparams::FINETUNE.batch_size),
        intent_text: ctx.cfg.intent_text.clone(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    let ctx = Ctx {
        backend: cli
            .backend
            .clone()
            .unwrap_or_else(|| cfg.backend.kind.clone()),
        exec: if cli.sequential || cfg.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        },
        cfg,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Dedupe(a) => dedupe(&ctx, a),
        Command::FilterTrain(a) => filter_train(&ctx, a),
        Command::FilterApply(a) => filter_apply(&ctx, a),
        Command::Audit(a) => audit(&ctx, a),
        Command::GenTrain(a) => dispatch(&ctx, GenTrain(&ctx, a)),
        Command::PseudoLabel(a) => dispatch(&ctx, PseudoLabel(&ctx, a)),
        Command::Format(a) => dispatch(&ctx, Format(&ctx, a)),
        Command::Split(a) => split(&ctx, a),
        Command::Pretrain(a) => dispatch(&ctx, Pretrain(&ctx, a)),
        Command::Finetune(a) => dispatch(&ctx, Finetune(&ctx, a)),
        Command::Eval(a) => dispatch(&ctx, Eval(&ctx, a)),
        Command::AblateShuffle(a) => ablate_shuffle(a),
        Command::AblateRemap(a) => ablate_remap(&ctx, a),
        Command::Overlap(a) => overlap(&ctx, a),
        Command::Report(a) => dispatch(&ctx, Report(&ctx, a)),
    }
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let mut map = FieldMap::new(a.utterance_key);
    if let Some(k) = a.intent_key {
        map = map.intent(k);
    }
    if let Some(k) = a.id_key {
        map = map.id(k);
    }
    let mut opts = IngestOptions::new(a.source);
    opts.labeled_quality = a.quality;
    opts.exec = ctx.exec;
    let got = ingest_generic_jsonl(&a.input, &map, &opts)?;
    ensure_parent(&a.out)?;
    let manifest = write_corpus(&got.examples, &a.out)?;
    println!(
        "ingested {} examples ({} lines, {} missing utterance, {} malformed) -> {}",
        manifest.count,
        got.lines,
        got.missing_utterance,
        got.malformed,
        a.out.display()
    );
    Ok(())
}

fn dedupe(ctx: &Ctx, a: DedupeArgs) -> Result<()> {
    let evals = if a.eval.is_empty() {
        ctx.cfg.paths.eval_sets.clone()
    } else {
        a.eval
    };
    if evals.is_empty() {
        return Err(missing("paths.eval_sets", "--eval"));
    }
    let eval_sets = evals
        .iter()
        .map(|p| read_corpus(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[LabeledExample]> = eval_sets.iter().map(Vec::as_slice).collect();
    let out = dedupe_against_eval(read_corpus(&a.input)?, &refs);
    ensure_parent(&a.out)?;
    write_corpus(&out.kept, &a.out)?;
    println!("kept {}, removed {}", out.kept.len(), out.removed);
    Ok(())
}

fn filter_train(ctx: &Ctx, a: FilterTrainArgs) -> Result<()> {
    if a.multidogo.is_none() && a.sgd.is_none() {
        return Err(Error::InvalidArgument(
            "pass --multidogo and/or --sgd".into(),
        ));
    }
    let load = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| read_corpus(p))
            .transpose()
            .map(Option::unwrap_or_default)
    };
    let set = build_filter_training_set(
        &load(&a.multidogo)?,
        &load(&a.sgd)?,
        &ctx.cfg.filter.labels(),
        a.seed,
    );
    let classifier = BagOfWordsClassifier { exec: ctx.exec };
    let params = ctx.cfg.filter.classifier.clone();
    let trained = train_intentfulness(&classifier, &set.examples, &params)?;
    write_json(&a.out, &trained.handle)?;
    println!(
        "trained on {} examples; hold-out accuracy {:.3}, precision {:.3} on {}",
        set.examples.len(),
        trained.holdout.accuracy,
        trained.holdout.precision,
        trained.holdout.size
    );
    Ok(())
}

fn filter_apply(ctx: &Ctx, a: FilterApplyArgs) -> Result<()> {
    let bytes = fs::read(&a.model).map_err(|e| io_error(&a.model, e))?;
    let model: LinearModel = serde_json::from_slice(&bytes)?;
    let policy = match &a.policy {
        Some(p) => parse_policy(p)?,
        None => ctx.cfg.filter.policy,
    };
    let utterances = read_corpus(&a.input)?;
    let scored = score_utterances(
        &BagOfWordsClassifier { exec: ctx.exec },
        &model,
        &utterances,
        ctx.exec,
    )?;
    if let Some(p) = &a.scores {
        ensure_parent(p)?;
        write_jsonl(&scored, p)?;
    }
    let kept = apply_threshold(&scored, policy)?;
    ensure_parent(&a.out)?;
    write_corpus(&kept, &a.out)?;
    println!("kept {} of {}", kept.len(), utterances.len());
    Ok(())
}

fn audit(ctx: &Ctx, a: AuditArgs) -> Result<()> {
    let filtered = read_corpus(&a.input)?;
    let size = a.size.unwrap_or(ctx.cfg.filter.audit_size);
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        write_jsonl(&audit_sample(&filtered, size, a.seed), out)?;
    }
    if let Some(j) = &a.judgments {
        let judgments: HashMap<String, bool> = read_jsonl::<Judgment>(j)?
            .into_iter()
            .map(|l| (l.id, l.intentful))
            .collect();
        println!(
            "precision {:.4}",
            audit_precision(&filtered, size, a.seed, &judgments)?
        );
    }
    Ok(())
}

struct GenTrain<'a>(&'a Ctx, GenTrainArgs);

impl BackendTask for GenTrain<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let mut data = Vec::new();
        for p in &a.input {
            data.extend(read_corpus(p)?);
        }
        let pairs = build_generator_training(&data, &ctx.cfg.intent_text)?;
        let hp = a.hp.over(ctx.cfg.pretrain).apply(Hyperparams::FINETUNE);
        let handle = train_generator(backend, &pairs, &hp)?;
        backend.save(&handle, &a.model_dir)?;
        println!(
            "trained generator on {} pairs -> {}",
            pairs.len(),
            a.model_dir.display()
        );
        Ok(())
    }
}

struct PseudoLabel<'a>(&'a Ctx, PseudoLabelArgs);

impl BackendTask for PseudoLabel<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let handle = backend.load(&a.model_dir)?;
        let out = pseudo_label(backend, &handle, &read_corpus(&a.input)?)?;
        ensure_parent(&a.out)?;
        write_corpus(&out.examples, &a.out)?;
        println!(
            "labeled {} utterances, dropped {} empty",
            out.examples.len(),
            out.dropped_empty
        );
        if !a.known.is_empty() && !out.examples.is_empty() {
            let mut known = Vec::new();
            for p in &a.known {
                known.extend(labels_of(&read_corpus(p)?, &ctx.cfg.intent_text)?);
            }
            println!(
                "novel intent rate {:.4}",
                novel_intent_rate(&out.examples, &known)?
            );
        }
        Ok(())
    }
}

struct Format<'a>(&'a Ctx, FormatArgs);

impl BackendTask for Format<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let f = &ctx.cfg.format;
        let opts = FormatOptions {
            intent_text: ctx.cfg.intent_text.clone(),
            noise_rate: a.noise_rate.unwrap_or(f.noise_rate),
            seed: a.seed.unwrap_or(f.seed),
            exec: ctx.exec,
        };
        if !(0.0..1.0).contains(&opts.noise_rate) {
            return Err(Error::InvalidArgument(format!(
                "noise rate {} outside [0, 1)",
                opts.noise_rate
            )));
        }
        let kind = a.kind.unwrap_or(f.kind);
        let records = format_corpus(&read_corpus(&a.input)?, kind, backend.tokenizer(), &opts)?;
        ensure_parent(&a.out)?;
        write_jsonl(&records, &a.out)?;
        println!(
            "wrote {} {kind} records -> {}",
            records.len(),
            a.out.display()
        );
        Ok(())
    }
}

fn split(ctx: &Ctx, a: SplitArgs) -> Result<()> {
    let input = or_config(a.input, &ctx.cfg.paths.train, "paths.train", "--in")?;
    let train = read_corpus(&input)?;
    let ks = a.ks.unwrap_or_else(|| ctx.cfg.splits.ks.clone());
    let seeds = a
        .seed
        .map(|s| vec![s])
        .unwrap_or_else(|| ctx.cfg.splits.seeds.clone());
    for seed in seeds {
        let set = make_fewshot_splits_with(&train, &ks, seed, ctx.exec)?;
        let files = write_split_set(&set, &a.out_dir)?;
        println!("seed {seed}: {} split files", files.len());
    }
    Ok(())
}

struct Pretrain<'a>(&'a Ctx, PretrainArgs);

impl BackendTask for Pretrain<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let records: Vec<PretrainRecord> = read_jsonl(&a.input)?;
        let trained = pretrain(backend, &records, &a.hp.over(ctx.cfg.pretrain))?;
        save_trained(backend, &trained, &a.model_dir)
    }
}

fn save_trained<B: Seq2SeqBackend>(
    backend: &B,
    trained: &Trained<B::Handle>,
    dir: &Path,
) -> Result<()> {
    backend.save(&trained.handle, dir)?;
    write_json(&dir.join("run_manifest.json"), &trained.manifest)?;
    println!(
        "{} run {} -> {}",
        trained.manifest.stage,
        trained.manifest.key,
        dir.display()
    );
    Ok(())
}

fn load_trained<B: Seq2SeqBackend>(backend: &B, dir: &Path) -> Result<Trained<B::Handle>> {
    let p = dir.join("run_manifest.json");
    let bytes = fs::read(&p).map_err(|e| io_error(&p, e))?;
    Ok(Trained {
        handle: backend.load(dir)?,
        manifest: serde_json::from_slice(&bytes)?,
    })
}

struct Finetune<'a>(&'a Ctx, FinetuneArgs);

impl BackendTask for Finetune<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let base = a
            .base
            .as_deref()
            .map(|d| load_trained(backend, d))
            .transpose()?;
        let split = read_corpus(&a.split)?;
        let trained = finetune(
            backend,
            base.as_ref(),
            &split,
            a.k,
            a.seed,
            &finetune_options(ctx, a.format),
        )?;
        save_trained(backend, &trained, &a.model_dir)
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    accuracy: f64,
    correct: usize,
    total: usize,
    predictions: &'a [String],
}

struct Eval<'a>(&'a Ctx, EvalArgs);

impl BackendTask for Eval<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let test = read_corpus(&or_config(
            a.test,
            &ctx.cfg.paths.test,
            "paths.test",
            "--test",
        )?)?;
        let handle = backend.load(&a.model_dir)?;
        let format = a.format.unwrap_or(ctx.cfg.finetune.format);
        let preds = predict_intents(backend, &handle, &test, format)?;
        let eval = evaluate_ic(&preds, &labels_of(&test, &ctx.cfg.intent_text)?)?;
        write_json(
            &a.out_dir.join("eval.json"),
            &EvalOutput {
                accuracy: eval.accuracy,
                correct: eval.correct,
                total: eval.total,
                predictions: &preds,
            },
        )?;
        let csv = a.out_dir.join("confusion.csv");
        fs::write(&csv, eval.confusion.to_csv()).map_err(|e| io_error(&csv, e))?;
        println!(
            "accuracy {:.4} ({}/{})",
            eval.accuracy, eval.correct, eval.total
        );
        Ok(())
    }
}

fn ablate_shuffle(a: AblateShuffleArgs) -> Result<()> {
    let shuffled = shuffle_pretrain_labels(&read_corpus(&a.input)?, a.seed)?;
    ensure_parent(&a.out)?;
    write_corpus(&shuffled, &a.out)?;
    println!("shuffled {} labels", shuffled.len());
    Ok(())
}

#[derive(Serialize)]
struct RemapManifest<'a> {
    seed: u64,
    remap: &'a LabelRemap,
}

fn ablate_remap(ctx: &Ctx, a: AblateRemapArgs) -> Result<()> {
    let train_path = or_config(a.train, &ctx.cfg.paths.train, "paths.train", "--train")?;
    let test_path = or_config(a.test, &ctx.cfg.paths.test, "paths.test", "--test")?;
    let (train, test, remap) = remap_eval_labels(
        &read_corpus(&train_path)?,
        &read_corpus(&test_path)?,
        a.seed,
    )?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
    write_corpus(&train, &a.out_dir.join("train.jsonl"))?;
    write_corpus(&test, &a.out_dir.join("test.jsonl"))?;
    write_json(
        &a.out_dir.join("remap.json"),
        &RemapManifest {
            seed: a.seed,
            remap: &remap,
        },
    )?;
    println!("remapped {} labels", remap.mapping.len());
    Ok(())
}

fn overlap(ctx: &Ctx, a: OverlapArgs) -> Result<()> {
    let pretrain = read_corpus(&a.pretrain)?;
    let eval = read_corpus(&or_config(
        a.eval,
        &ctx.cfg.paths.test,
        "paths.test",
        "--eval",
    )?)?;
    let cfg = &ctx.cfg.intent_text;
    let eval_labels: Vec<NaturalLabel> = labels_of(&eval, cfg)?
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let stopwords: HashSet<String> = match &a.stopwords {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| io_error(p, e))?
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect(),
        None => HashSet::new(),
    };
    let texts: Vec<String> = pretrain.iter().map(|e| e.utterance.clone()).collect();
    let encoder = BagOfWordsEncoder::fit(
        texts
            .iter()
            .chain(eval.iter().map(|e| &e.utterance))
            .map(String::as_str),
    );
    let report = OverlapReport {
        exact_or_substring: intent_overlap_report(&pretrain, &eval_labels, cfg),
        lexical: lexical_overlap_report(&pretrain, &eval_labels, &stopwords, cfg),
        top_similar: semantic_similarity_report(
            &encoder,
            &texts,
            &eval,
            DEFAULT_PER_INTENT_SAMPLE,
            a.top,
            a.seed,
            ctx.exec,
        )?,
    };
    write_json(&a.out, &report)?;
    println!(
        "exact/substring {} ({:.4}), lexical {} ({:.4})",
        report.exact_or_substring.count,
        report.exact_or_substring.fraction,
        report.lexical.count,
        report.lexical.fraction
    );
    Ok(())
}

struct Report<'a>(&'a Ctx, ReportArgs);

impl BackendTask for Report<'_> {
    type Out = ();
    fn run<B: Seq2SeqBackend>(self, backend: &B) -> Result<()> {
        let (ctx, a) = (self.0, self.1);
        let p = &ctx.cfg.paths;
        let train = read_corpus(
            p.train
                .as_ref()
                .ok_or_else(|| missing("paths.train", "a config"))?,
        )?;
        let test = read_corpus(
            p.test
                .as_ref()
                .ok_or_else(|| missing("paths.test", "a config"))?,
        )?;
        let out_dir = or_config(a.out_dir, &p.out_dir, "paths.out_dir", "--out-dir")?;
        let records = match (&p.pretrain_corpus, a.no_pretrain) {
            (Some(path), false) => {
                let opts = FormatOptions {
                    intent_text: ctx.cfg.intent_text.clone(),
                    noise_rate: ctx.cfg.format.noise_rate,
                    seed: ctx.cfg.format.seed,
                    exec: ctx.exec,
                };
                Some(format_corpus(
                    &read_corpus(path)?,
                    ctx.cfg.format.kind,
                    backend.tokenizer(),
                    &opts,
                )?)
            }
            _ => None,
        };
        let mut exp = Experiment::new(&train, &test);
        exp.pretrain_records = records.as_deref();
        exp.pretrain_hp = ctx.cfg.pretrain;
        exp.seeds = ctx.cfg.splits.seeds.clone();
        exp.ks = ctx.cfg.splits.ks.clone();
        exp.finetune = finetune_options(ctx, None);
        exp.remap_seed = a.remap_seed;
        exp.out_dir = Some(out_dir.clone());
        exp.exec = ctx.exec;
        let report = run_experiment(backend, &exp)?;
        let summary: BTreeMap<usize, (f64, f64)> = report
            .by_k
            .iter()
            .map(|(k, r)| (*k, (r.mean, r.std)))
            .collect();
        for (k, (mean, std)) in summary {
            println!("k={k}: {mean:.4} ± {std:.4}");
        }
        if !report.failed.is_empty() {
            println!(
                "{} failed cells (see {})",
                report.failed.len(),
                out_dir.join("report.json").display()
            );
        }
        Ok(())
    }
}
