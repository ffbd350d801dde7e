//! Pre-training, few-shot fine-tuning, prediction, evaluation and
//! aggregation over a (seed, k) grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablations::{remap_eval_labels, LabelRemap};
use crate::backend::{HpOverride, Hyperparams, Seq2SeqBackend};
use crate::classifier::{ClassifierBackend, ClassifierParams};
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::{
    concat_utterance_label, ic_input, make_finetune_record, make_joint_icsl_record,
    make_label_denoise_ft_record, PretrainRecord, RecordFormat, PARSE_PREFIX,
};
use crate::intent_text::{natural_label, normalize_label, IntentTextConfig, NaturalLabel};
use crate::rng::checksum;
use crate::splits::{make_fewshot_splits_with, validate_ks};
use crate::tokenizer::{sentinel_index, Tokenizer};

/// Confusion column for predictions outside the gold label set.
pub const EPSILON: &str = "ε";

/// Content hash of a record list, independent of how it was stored.
pub fn records_checksum(records: &[PretrainRecord]) -> Result<String> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(checksum(&buf))
}

fn examples_checksum(examples: &[LabeledExample]) -> Result<String> {
    let mut buf = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    Ok(checksum(&buf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub corpus_checksum: String,
    /// Set when every record shares one format.
    pub format: Option<RecordFormat>,
    pub records: usize,
    pub hp: Hyperparams,
    pub seed: u64,
    /// Key of the manifest this run continued from.
    pub init: Option<String>,
    /// Hash over all fields above; two runs with equal keys are interchangeable.
    pub key: String,
}

impl RunManifest {
    fn new(
        stage: &str,
        records: &[PretrainRecord],
        hp: Hyperparams,
        init: Option<String>,
    ) -> Result<Self> {
        let formats: BTreeSet<RecordFormat> = records.iter().map(|r| r.format).collect();
        let mut m = RunManifest {
            stage: stage.to_string(),
            corpus_checksum: records_checksum(records)?,
            format: if formats.len() == 1 {
                formats.into_iter().next()
            } else {
                None
            },
            records: records.len(),
            hp,
            seed: hp.seed,
            init,
            key: String::new(),
        };
        m.key = checksum(&serde_json::to_vec(&m)?);
        Ok(m)
    }
}

#[derive(Debug)]
pub struct Trained<H> {
    pub handle: H,
    pub manifest: RunManifest,
}

/// Secondary pre-training. Defaults to learning rate 5e-4, batch size 128
/// and 3 epochs; `hp` overrides individual fields.
pub fn pretrain<B: Seq2SeqBackend>(
    backend: &B,
    records: &[PretrainRecord],
    hp: &HpOverride,
) -> Result<Trained<B::Handle>> {
    if records.is_empty() {
        return Err(Error::Empty("pre-training records"));
    }
    let hp = hp.apply(Hyperparams::PRETRAIN);
    hp.validate()?;
    let manifest = RunManifest::new("pretrain", records, hp, None)?;
    let handle = backend.train(None, records, &hp)?;
    Ok(Trained { handle, manifest })
}

/// Fine-tuning epochs per split size: `base_epochs` at `k_max`, doubled for
/// every halving of `k`, rounded up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSchedule {
    pub base_epochs: usize,
    pub k_max: usize,
}

impl Default for EpochSchedule {
    fn default() -> Self {
        EpochSchedule {
            base_epochs: 2,
            k_max: 32,
        }
    }
}

impl EpochSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_epochs == 0 || self.k_max == 0 {
            return Err(Error::InvalidArgument(format!(
                "epoch schedule must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn epochs(&self, k: usize) -> usize {
        (self.base_epochs * self.k_max).div_ceil(k.max(1))
    }
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneFormat {
    #[default]
    Finetune,
    LabelDenoiseFt,
    JointIcsl,
}

impl FinetuneFormat {
    pub fn record_format(self) -> RecordFormat {
        match self {
            FinetuneFormat::Finetune => RecordFormat::Finetune,
            FinetuneFormat::LabelDenoiseFt => RecordFormat::LabelDenoiseFt,
            FinetuneFormat::JointIcsl => RecordFormat::JointIcsl,
        }
    }

    pub fn record(
        self,
        example: &LabeledExample,
        tok: &dyn Tokenizer,
        cfg: &IntentTextConfig,
    ) -> Result<PretrainRecord> {
        match self {
            FinetuneFormat::Finetune => make_finetune_record(example, cfg),
            FinetuneFormat::LabelDenoiseFt => make_label_denoise_ft_record(example, tok, cfg),
            FinetuneFormat::JointIcsl => {
                if example.slots.as_ref().is_none_or(Vec::is_empty) {
                    return Err(Error::InvalidExample {
                        id: example.id.clone(),
                        message: "joint_icsl fine-tuning needs slot annotations".into(),
                    });
                }
                make_joint_icsl_record(example, cfg)
            }
        }
    }

    /// Model input for an unlabeled test utterance.
    pub fn input(self, utterance: &str, tok: &dyn Tokenizer) -> String {
        match self {
            FinetuneFormat::Finetune => ic_input(utterance),
            FinetuneFormat::LabelDenoiseFt => {
                concat_utterance_label(utterance.trim(), &tok.sentinel(0))
            }
            FinetuneFormat::JointIcsl => format!("{PARSE_PREFIX}{}", utterance.trim()),
        }
    }

    /// Intent text carried by a generation.
    pub fn decode_intent(self, generated: &str) -> String {
        match self {
            FinetuneFormat::Finetune => generated.trim().to_string(),
            FinetuneFormat::LabelDenoiseFt => generated
                .split_whitespace()
                .skip_while(|t| sentinel_index(t).is_some())
                .collect::<Vec<_>>()
                .join(" "),
            FinetuneFormat::JointIcsl => parse_bracketed(generated)
                .map(|p| p.intent)
                .unwrap_or_default(),
        }
    }
}

impl std::str::FromStr for FinetuneFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(FinetuneFormat::Finetune),
            "label_denoise_ft" => Ok(FinetuneFormat::LabelDenoiseFt),
            "joint_icsl" => Ok(FinetuneFormat::JointIcsl),
            other => Err(Error::InvalidArgument(format!(
                "unknown fine-tuning format `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneOptions {
    #[serde(default)]
    pub format: FinetuneFormat,
    #[serde(default)]
    pub schedule: EpochSchedule,
    #[serde(default = "default_ft_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub intent_text: IntentTextConfig,
}

fn default_ft_lr() -> f64 {
    Hyperparams::FINETUNE.learning_rate
}

fn default_ft_batch() -> usize {
    Hyperparams::FINETUNE.batch_size
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            format: FinetuneFormat::default(),
            schedule: EpochSchedule::default(),
            learning_rate: default_ft_lr(),
            batch_size: default_ft_batch(),
            intent_text: IntentTextConfig::default(),
        }
    }
}

impl FinetuneOptions {
    pub fn hyperparams(&self, k: usize, seed: u64) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.schedule.epochs(k),
            seed,
        }
    }
}

/// Few-shot fine-tuning of `base` (or of a fresh model) on one split of size
/// `k`, with epochs taken from the schedule.
pub fn finetune<B: Seq2SeqBackend>(
    backend: &B,
    base: Option<&Trained<B::Handle>>,
    split: &[LabeledExample],
    k: usize,
    seed: u64,
    opts: &FinetuneOptions,
) -> Result<Trained<B::Handle>> {
    if split.is_empty() {
        return Err(Error::Empty("fine-tuning split"));
    }
    opts.schedule.validate()?;
    let tok = backend.tokenizer();
    let records = split
        .iter()
        .map(|e| opts.format.record(e, tok, &opts.intent_text))
        .collect::<Result<Vec<_>>>()?;
    let hp = opts.hyperparams(k, seed);
    hp.validate()?;
    let manifest = RunManifest::new(
        "finetune",
        &records,
        hp,
        base.map(|b| b.manifest.key.clone()),
    )?;
    let handle = backend.train(base.map(|b| &b.handle), &records, &hp)?;
    Ok(Trained { handle, manifest })
}

/// Raw generations for the test utterances, one per example, in order.
pub fn generate_for<B: Seq2SeqBackend>(
    backend: &B,
    handle: &B::Handle,
    test: &[LabeledExample],
    format: FinetuneFormat,
) -> Result<Vec<String>> {
    let tok = backend.tokenizer();
    let inputs: Vec<String> = test
        .iter()
        .map(|e| format.input(&e.utterance, tok))
        .collect();
    let out = backend.generate(handle, &inputs)?;
    if out.len() != inputs.len() {
        return Err(Error::backend(
            0,
            format!("expected {} generations, got {}", inputs.len(), out.len()),
        ));
    }
    Ok(out)
}

/// Predicted intent text per test example.
pub fn predict_intents<B: Seq2SeqBackend>(
    backend: &B,
    handle: &B::Handle,
    test: &[LabeledExample],
    format: FinetuneFormat,
) -> Result<Vec<String>> {
    Ok(generate_for(backend, handle, test, format)?
        .iter()
        .map(|g| format.decode_intent(g))
        .collect())
}

/// Counts keyed by gold label, then predicted label or [`EPSILON`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: &str, predicted: &str, n: usize) {
        *self
            .counts
            .entry(gold.to_string())
            .or_default()
            .entry(predicted.to_string())
            .or_default() += n;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (g, row) in &other.counts {
            for (p, n) in row {
                self.add(g, p, *n);
            }
        }
    }

    pub fn get(&self, gold: &str, predicted: &str) -> usize {
        self.counts
            .get(gold)
            .and_then(|r| r.get(predicted))
            .copied()
            .unwrap_or(0)
    }

    pub fn row_total(&self, gold: &str) -> usize {
        self.counts.get(gold).map(|r| r.values().sum()).unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|r| r.values()).sum()
    }

    pub fn epsilon_total(&self) -> usize {
        self.counts.values().filter_map(|r| r.get(EPSILON)).sum()
    }

    /// Square matrix over the gold labels plus an ε column.
    pub fn to_csv(&self) -> String {
        let labels: Vec<&String> = self.counts.keys().collect();
        let mut out = String::from("gold");
        for l in &labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push(',');
        out.push_str(EPSILON);
        out.push('\n');
        for g in &labels {
            out.push_str(&csv_field(g));
            for p in labels.iter().map(|l| l.as_str()).chain([EPSILON]) {
                out.push_str(&format!(",{}", self.get(g, p)));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcEvaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: ConfusionMatrix,
}

/// Exact-match intent accuracy under [`normalize_label`]. A prediction that
/// matches some other gold-set label is counted under that label; anything
/// else goes to the ε column.
pub fn evaluate_ic(preds: &[String], golds: &[NaturalLabel]) -> Result<IcEvaluation> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let label_set: BTreeMap<String, &str> = golds
        .iter()
        .map(|g| (normalize_label(g.as_str()), g.as_str()))
        .collect();
    let mut confusion = ConfusionMatrix::default();
    let mut correct = 0;
    for (p, g) in preds.iter().zip(golds) {
        let key = normalize_label(p);
        if key == normalize_label(g.as_str()) {
            correct += 1;
        }
        let column = label_set.get(&key).copied().unwrap_or(EPSILON);
        confusion.add(g.as_str(), column, 1);
    }
    Ok(IcEvaluation {
        accuracy: correct as f64 / golds.len() as f64,
        correct,
        total: golds.len(),
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BracketParse {
    pub intent: String,
    pub slots: Vec<(String, String)>,
}

/// Parse `[ text [ span | slot ] text | intent ]`. Returns `None` when the
/// brackets do not follow that grammar.
pub fn parse_bracketed(text: &str) -> Option<BracketParse> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 3 || tokens[0] != "[" || tokens[tokens.len() - 1] != "]" {
        return None;
    }
    let inner = &tokens[1..tokens.len() - 1];
    let mut slots = Vec::new();
    let mut intent: Option<Vec<&str>> = None;
    let mut i = 0;
    while i < inner.len() {
        match inner[i] {
            "[" => {
                if intent.is_some() {
                    return None;
                }
                let bar = i + 1 + inner[i + 1..].iter().position(|t| *t == "|")?;
                let close = bar + 1 + inner[bar + 1..].iter().position(|t| *t == "]")?;
                let span = &inner[i + 1..bar];
                let label = &inner[bar + 1..close];
                if span.is_empty()
                    || label.is_empty()
                    || span.contains(&"[")
                    || label.contains(&"[")
                {
                    return None;
                }
                slots.push((span.join(" "), label.join(" ")));
                i = close + 1;
            }
            "|" => {
                if intent.is_some() {
                    return None;
                }
                intent = Some(Vec::new());
                i += 1;
            }
            "]" => return None,
            t => {
                if let Some(words) = intent.as_mut() {
                    words.push(t);
                }
                i += 1;
            }
        }
    }
    let intent = intent?.join(" ");
    if intent.is_empty() {
        return None;
    }
    Some(BracketParse { intent, slots })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Micro-averaged span F1 over exact (span text, slot label) pairs.
/// Unparseable predictions contribute no predicted pairs.
pub fn evaluate_sl(pred_parses: &[String], gold: &[LabeledExample]) -> Result<SlScore> {
    if pred_parses.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parses for {} gold examples",
            pred_parses.len(),
            gold.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in pred_parses.iter().zip(gold) {
        let mut gold_pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
        for s in g.sorted_slots() {
            let text = g
                .span_text(s)
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            *gold_pairs.entry((text, s.label.clone())).or_default() += 1;
            n_gold += 1;
        }
        for pair in parse_bracketed(p).map(|b| b.slots).unwrap_or_default() {
            n_pred += 1;
            if let Some(c) = gold_pairs.get_mut(&pair).filter(|c| **c > 0) {
                *c -= 1;
                tp += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (precision, recall) = (ratio(tp, n_pred), ratio(tp, n_gold));
    let f1 = if n_pred == 0 && n_gold == 0 {
        1.0
    } else if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SlScore {
        precision: if n_pred == 0 && n_gold == 0 {
            1.0
        } else {
            precision
        },
        recall: if n_gold == 0 && n_pred == 0 {
            1.0
        } else {
            recall
        },
        f1,
        true_positives: tp,
        predicted: n_pred,
        gold: n_gold,
    })
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate_seeds(per_seed: &BTreeMap<u64, f64>) -> Result<(f64, f64)> {
    if per_seed.is_empty() {
        return Err(Error::Empty("per-seed accuracies"));
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.values().sum::<f64>() / n;
    let var = per_seed.values().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub per_seed_accuracy: BTreeMap<u64, f64>,
    pub mean: f64,
    pub std: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCell {
    pub seed: u64,
    pub k: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub k: usize,
    pub key: String,
    pub accuracy: f64,
    pub predictions: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub manifest: Option<RunManifest>,
}

impl CellResult {
    pub fn id(&self) -> String {
        cell_id(self.seed, self.k)
    }
}

pub fn cell_id(seed: u64, k: usize) -> String {
    format!("s{seed}-k{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub by_k: BTreeMap<usize, KReport>,
    pub cells: usize,
    pub failed: Vec<FailedCell>,
    pub remap: Option<LabelRemap>,
    pub pretrain: Option<RunManifest>,
    /// Always `population`.
    pub std_kind: String,
}

impl EvalReport {
    fn assemble(
        results: Vec<CellResult>,
        failed: Vec<FailedCell>,
        remap: Option<LabelRemap>,
        pretrain: Option<RunManifest>,
    ) -> Result<Self> {
        let mut by_k: BTreeMap<usize, (BTreeMap<u64, f64>, ConfusionMatrix)> = BTreeMap::new();
        for r in &results {
            let entry = by_k.entry(r.k).or_default();
            entry.0.insert(r.seed, r.accuracy);
            entry.1.merge(&r.confusion);
        }
        let by_k = by_k
            .into_iter()
            .map(|(k, (per_seed_accuracy, confusion))| {
                let (mean, std) = aggregate_seeds(&per_seed_accuracy)?;
                Ok((
                    k,
                    KReport {
                        per_seed_accuracy,
                        mean,
                        std,
                        confusion,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            by_k,
            cells: results.len(),
            failed,
            remap,
            pretrain,
            std_kind: "population".into(),
        })
    }

    /// Write `report.json` and one `confusion_k{k}.csv` per split size.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;
        for (k, r) in &self.by_k {
            let p = dir.join(format!("confusion_k{k}.csv"));
            fs::write(&p, r.confusion.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

/// One run of the few-shot protocol.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub train: &'a [LabeledExample],
    pub test: &'a [LabeledExample],
    /// Skip pre-training when `None`.
    pub pretrain_records: Option<&'a [PretrainRecord]>,
    pub pretrain_hp: HpOverride,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub finetune: FinetuneOptions,
    /// Derangement seed for the misleading-label ablation.
    pub remap_seed: Option<u64>,
    /// Cache and output directory; nothing is persisted when `None`.
    pub out_dir: Option<PathBuf>,
    pub exec: Exec,
}

impl<'a> Experiment<'a> {
    pub fn new(train: &'a [LabeledExample], test: &'a [LabeledExample]) -> Self {
        Experiment {
            train,
            test,
            pretrain_records: None,
            pretrain_hp: HpOverride::default(),
            seeds: vec![1, 2, 3, 4, 5],
            ks: crate::splits::DEFAULT_KS.to_vec(),
            finetune: FinetuneOptions::default(),
            remap_seed: None,
            out_dir: None,
            exec: Exec::default(),
        }
    }
}

fn gold_labels(test: &[LabeledExample], cfg: &IntentTextConfig) -> Result<Vec<NaturalLabel>> {
    test.iter()
        .map(|e| {
            e.require_labeled()?;
            natural_label(&e.intents, cfg)
        })
        .collect()
}

fn pretrain_cached<B: Seq2SeqBackend>(
    backend: &B,
    records: &[PretrainRecord],
    hp: &HpOverride,
    out: Option<&Path>,
) -> Result<Trained<B::Handle>> {
    let Some(out) = out else {
        return pretrain(backend, records, hp);
    };
    let dir = out.join("pretrain");
    let want = RunManifest::new("pretrain", records, hp.apply(Hyperparams::PRETRAIN), None)?;
    if let Some(have) = read_json::<RunManifest>(&dir.join("manifest.json")) {
        if have.key == want.key {
            if let Ok(handle) = backend.load(&dir.join("model")) {
                log::info!("pre-training cache hit ({})", have.key);
                return Ok(Trained {
                    handle,
                    manifest: have,
                });
            }
        }
    }
    let trained = pretrain(backend, records, hp)?;
    backend.save(&trained.handle, &dir.join("model"))?;
    write_json(&dir.join("manifest.json"), &trained.manifest)?;
    Ok(trained)
}

struct Cell<'a> {
    seed: u64,
    k: usize,
    split: &'a [LabeledExample],
    key: String,
}

/// Pre-train (optionally), then fine-tune, predict and evaluate every
/// (seed, k) cell. A failing cell is recorded and the rest of the grid
/// continues. With `out_dir`, completed cells are reused when their key
/// (pre-trained model, split contents, fine-tuning options, test set)
/// is unchanged.
pub fn run_experiment<B: Seq2SeqBackend>(backend: &B, exp: &Experiment<'_>) -> Result<EvalReport> {
    validate_ks(&exp.ks)?;
    if exp.seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    exp.finetune.schedule.validate()?;
    let (train, test, remap) = match exp.remap_seed {
        Some(s) => {
            let (tr, te, remap) = remap_eval_labels(exp.train, exp.test, s)?;
            (tr, te, Some(remap))
        }
        None => (exp.train.to_vec(), exp.test.to_vec(), None),
    };
    let golds = gold_labels(&test, &exp.finetune.intent_text)?;
    if golds.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let out = exp.out_dir.as_deref();
    let base = exp
        .pretrain_records
        .map(|r| pretrain_cached(backend, r, &exp.pretrain_hp, out))
        .transpose()?;

    let split_sets = exp
        .seeds
        .iter()
        .map(|&s| make_fewshot_splits_with(&train, &exp.ks, s, exp.exec))
        .collect::<Result<Vec<_>>>()?;
    let test_sum = examples_checksum(&test)?;
    let opts_json = serde_json::to_string(&exp.finetune)?;
    let base_key = base
        .as_ref()
        .map(|b| b.manifest.key.clone())
        .unwrap_or_default();
    let mut cells = Vec::new();
    for set in &split_sets {
        for &k in &exp.ks {
            let split = set.get(k).unwrap_or(&[]);
            let key = checksum(
                format!(
                    "{base_key}|{}|{opts_json}|{test_sum}|{}|{k}",
                    examples_checksum(split)?,
                    set.seed
                )
                .as_bytes(),
            );
            cells.push(Cell {
                seed: set.seed,
                k,
                split,
                key,
            });
        }
    }

    let outcomes = exp.exec.map(&cells, |cell| {
        let path = out.map(|o| {
            o.join("cells")
                .join(format!("{}.json", cell_id(cell.seed, cell.k)))
        });
        if let Some(cached) = path.as_deref().and_then(read_json::<CellResult>) {
            if cached.key == cell.key {
                return Ok(cached);
            }
        }
        let result = run_cell(backend, base.as_ref(), cell, &test, &golds, &exp.finetune)?;
        if let Some(p) = &path {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_json(p, &result)?;
        }
        Ok::<_, Error>(result)
    });

    let mut results = Vec::new();
    let mut failed = Vec::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell_id(cell.seed, cell.k));
                failed.push(FailedCell {
                    seed: cell.seed,
                    k: cell.k,
                    error: e.to_string(),
                });
            }
        }
    }
    let report = EvalReport::assemble(results, failed, remap, base.map(|b| b.manifest))?;
    if let Some(o) = out {
        report.write(o)?;
    }
    Ok(report)
}

fn run_cell<B: Seq2SeqBackend>(
    backend: &B,
    base: Option<&Trained<B::Handle>>,
    cell: &Cell<'_>,
    test: &[LabeledExample],
    golds: &[NaturalLabel],
    opts: &FinetuneOptions,
) -> Result<CellResult> {
    let tuned = finetune(backend, base, cell.split, cell.k, cell.seed, opts)?;
    let predictions = predict_intents(backend, &tuned.handle, test, opts.format)?;
    let eval = evaluate_ic(&predictions, golds)?;
    Ok(CellResult {
        seed: cell.seed,
        k: cell.k,
        key: cell.key.clone(),
        accuracy: eval.accuracy,
        predictions,
        confusion: eval.confusion,
        manifest: Some(tuned.manifest),
    })
}

/// The same grid with a discriminative classifier over utterances and
/// natural labels, for side-by-side comparison.
#[allow(clippy::too_many_arguments)]
pub fn run_discriminative_baseline<C: ClassifierBackend>(
    classifier: &C,
    train: &[LabeledExample],
    test: &[LabeledExample],
    seeds: &[u64],
    ks: &[usize],
    params: &ClassifierParams,
    cfg: &IntentTextConfig,
    exec: Exec,
) -> Result<EvalReport> {
    validate_ks(ks)?;
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    let golds = gold_labels(test, cfg)?;
    let texts: Vec<String> = test.iter().map(|e| e.utterance.clone()).collect();
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for &seed in seeds {
        let set = make_fewshot_splits_with(train, ks, seed, exec)?;
        for &k in ks {
            let split = set.get(k).unwrap_or(&[]);
            let outcome = (|| {
                let x: Vec<String> = split.iter().map(|e| e.utterance.clone()).collect();
                let y = gold_labels(split, cfg)?
                    .into_iter()
                    .map(NaturalLabel::into_string)
                    .collect::<Vec<_>>();
                let p = ClassifierParams {
                    seed,
                    ..params.clone()
                };
                let model = classifier.train(&x, &y, &p)?;
                let predictions = classifier.predict(&model, &texts)?;
                let eval = evaluate_ic(&predictions, &golds)?;
                Ok::<_, Error>(CellResult {
                    seed,
                    k,
                    key: String::new(),
                    accuracy: eval.accuracy,
                    predictions,
                    confusion: eval.confusion,
                    manifest: None,
                })
            })();
            match outcome {
                Ok(r) => results.push(r),
                Err(e) => failed.push(FailedCell {
                    seed,
                    k,
                    error: e.to_string(),
                }),
            }
        }
    }
    EvalReport::assemble(results, failed, None, None)
}
