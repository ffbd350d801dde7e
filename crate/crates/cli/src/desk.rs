//! Synthetic desk-scale corpora and the directional pre-training check.
//!
//! Utterances come from carrier templates filled with a verb and an object;
//! the intent is `VerbObject`, so its natural label (`Verb object`) can be
//! read off the utterance. Pre-training intents and evaluation intents use
//! disjoint words.

use std::time::{Duration, Instant};

use lsap_core::ablations::shuffle_pretrain_labels;
use lsap_core::backend::{HpOverride, Seq2SeqBackend};
use lsap_core::corpus::{LabeledExample, Quality};
use lsap_core::exec::Exec;
use lsap_core::formats::{format_corpus, FormatOptions, PretrainRecord, RecordFormat};
use lsap_core::rng::rng;
use lsap_core::runner::{run_experiment, EvalReport, Experiment, FinetuneFormat, FinetuneOptions};
use lsap_core::Result;
use rand::seq::IndexedRandom;
use rand::Rng;

const TEMPLATES: [&str; 12] = [
    "can you {v} a {o} for me",
    "i would like to {v} my {o}",
    "please {v} the {o} now",
    "i need to {v} a {o} today",
    "help me {v} the {o}",
    "is it possible to {v} my {o} tomorrow",
    "{v} the {o} please",
    "could you {v} a {o} for tonight",
    "i want you to {v} the {o} right away",
    "hey , {v} my {o} again",
    "would you {v} this {o} for my family",
    "time to {v} the {o} i think",
];

const FILLERS: [&str; 8] = [
    "",
    "",
    "",
    " thanks",
    " asap",
    " if you can",
    " quickly",
    " when you have a minute",
];

const PRETRAIN_VERBS: [&str; 10] = [
    "book", "find", "play", "check", "order", "reserve", "call", "send", "buy", "rent",
];
const PRETRAIN_OBJECTS: [&str; 10] = [
    "flight", "hotel", "song", "weather", "pizza", "table", "taxi", "email", "ticket", "car",
];

/// Evaluation intents: every verb and every object is shared by two or
/// more intents.
pub const EVAL_INTENTS: [(&str, &str); 5] = [
    ("cancel", "subscription"),
    ("cancel", "delivery"),
    ("renew", "subscription"),
    ("renew", "delivery"),
    ("track", "delivery"),
];

fn intent_id(verb: &str, object: &str) -> String {
    let cap = |s: &str| {
        let mut c = s.chars();
        c.next()
            .map(|f| f.to_uppercase().chain(c).collect::<String>())
            .unwrap_or_default()
    };
    format!("{}{}", cap(verb), cap(object))
}

fn utterance(r: &mut impl Rng, verb: &str, object: &str) -> String {
    let t = TEMPLATES.choose(r).expect("templates are non-empty");
    let filler = FILLERS.choose(r).expect("fillers are non-empty");
    format!("{}{filler}", t.replace("{v}", verb).replace("{o}", object))
}

fn examples(
    pairs: &[(&str, &str)],
    per_intent: usize,
    prefix: &str,
    seed: u64,
) -> Vec<LabeledExample> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(pairs.len() * per_intent);
    for i in 0..per_intent {
        for (v, o) in pairs {
            out.push(LabeledExample::labeled(
                format!("{prefix}-{v}-{o}-{i}"),
                utterance(&mut r, v, o),
                vec![intent_id(v, o)],
                Quality::Gold,
                prefix,
            ));
        }
    }
    out
}

/// The 50 pre-training intents.
pub fn pretrain_intents() -> Vec<(&'static str, &'static str)> {
    let mut out = Vec::new();
    for (i, v) in PRETRAIN_VERBS.iter().enumerate() {
        for (j, o) in PRETRAIN_OBJECTS.iter().enumerate() {
            if (i + j) % 2 == 0 {
                out.push((*v, *o));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DeskData {
    pub pretrain: Vec<LabeledExample>,
    pub eval_train: Vec<LabeledExample>,
    pub eval_test: Vec<LabeledExample>,
}

/// 50 intents x 40 pre-training utterances, and 5 evaluation intents with a
/// 10-per-intent training pool and 20-per-intent test set.
pub fn desk_data(seed: u64) -> DeskData {
    DeskData {
        pretrain: examples(&pretrain_intents(), 40, "pretrain", seed),
        eval_train: examples(&EVAL_INTENTS, 10, "evaltrain", seed.wrapping_add(1)),
        eval_test: examples(&EVAL_INTENTS, 20, "evaltest", seed.wrapping_add(2)),
    }
}

#[derive(Debug, Clone)]
pub struct DeskSettings {
    pub pretrain_hp: HpOverride,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub finetune: FinetuneOptions,
    pub shuffle_seed: u64,
}

impl Default for DeskSettings {
    fn default() -> Self {
        DeskSettings {
            pretrain_hp: HpOverride {
                learning_rate: Some(1e-3),
                batch_size: Some(32),
                epochs: Some(12),
                seed: Some(0),
            },
            seeds: vec![1, 2, 3, 4, 5],
            k: 1,
            finetune: FinetuneOptions {
                format: FinetuneFormat::LabelDenoiseFt,
                ..Default::default()
            },
            shuffle_seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskOutcome {
    pub lsap: EvalReport,
    pub baseline: EvalReport,
    pub shuffled: EvalReport,
    pub elapsed: Duration,
}

impl DeskOutcome {
    fn mean(r: &EvalReport, k: usize) -> f64 {
        r.by_k.get(&k).map(|x| x.mean).unwrap_or(0.0)
    }

    pub fn means(&self, k: usize) -> (f64, f64, f64) {
        (
            Self::mean(&self.lsap, k),
            Self::mean(&self.baseline, k),
            Self::mean(&self.shuffled, k),
        )
    }

    /// LSAP at least matches the baseline, and shuffled labels do no better
    /// than LSAP.
    pub fn directional(&self, k: usize) -> bool {
        let (lsap, base, shuffled) = self.means(k);
        lsap >= base && shuffled <= lsap
    }
}

fn label_denoise(
    examples: &[LabeledExample],
    tok: &dyn lsap_core::tokenizer::Tokenizer,
) -> Result<Vec<PretrainRecord>> {
    format_corpus(
        examples,
        RecordFormat::LabelDenoise,
        tok,
        &FormatOptions::default(),
    )
}

/// Fine-tune and evaluate three ways: after label-denoising pre-training,
/// without pre-training, and after pre-training on shuffled labels.
pub fn run_desk_check<B: Seq2SeqBackend>(
    backend: &B,
    data: &DeskData,
    settings: &DeskSettings,
) -> Result<DeskOutcome> {
    let start = Instant::now();
    let clean = label_denoise(&data.pretrain, backend.tokenizer())?;
    let shuffled = label_denoise(
        &shuffle_pretrain_labels(&data.pretrain, settings.shuffle_seed)?,
        backend.tokenizer(),
    )?;
    let run = |records: Option<&[PretrainRecord]>| {
        let mut exp = Experiment::new(&data.eval_train, &data.eval_test);
        exp.pretrain_records = records;
        exp.pretrain_hp = settings.pretrain_hp;
        exp.seeds = settings.seeds.clone();
        exp.ks = vec![settings.k];
        exp.finetune = settings.finetune.clone();
        exp.exec = Exec::Sequential;
        run_experiment(backend, &exp)
    };
    let lsap = run(Some(&clean))?;
    let baseline = run(None)?;
    let shuffled = run(Some(&shuffled))?;
    Ok(DeskOutcome {
        lsap,
        baseline,
        shuffled,
        elapsed: start.elapsed(),
    })
}
