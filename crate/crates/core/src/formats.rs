//! Pre-training and fine-tuning record construction.
//!
//! | format             | input                                   | target                         |
//! |--------------------|-----------------------------------------|--------------------------------|
//! | `span_denoise`     | `utt. label` with noised spans masked    | `⟨mask_0⟩ span0 ⟨mask_1⟩ ...`  |
//! | `ic`, `finetune`   | `intent classification: utt`            | `label`                        |
//! | `label_denoise(_ft)` | `utt. ⟨mask_0⟩`                       | `⟨mask_0⟩ label`               |
//! | `joint_icsl`       | `semantic parse: utt`                   | `[ utt with [ span | slot ] | label ]` |
//!
//! One record per example; sequences are never packed together.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::intent_text::{natural_label, IntentTextConfig, NaturalLabel};
use crate::rng::rng_for;
use crate::tokenizer::{contains_sentinel, Tokenizer};

pub const IC_PREFIX: &str = "intent classification: ";
pub const PARSE_PREFIX: &str = "semantic parse: ";
pub const DEFAULT_NOISE_RATE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    SpanDenoise,
    Ic,
    LabelDenoise,
    Finetune,
    LabelDenoiseFt,
    JointIcsl,
}

impl RecordFormat {
    pub const ALL: [RecordFormat; 6] = [
        RecordFormat::SpanDenoise,
        RecordFormat::Ic,
        RecordFormat::LabelDenoise,
        RecordFormat::Finetune,
        RecordFormat::LabelDenoiseFt,
        RecordFormat::JointIcsl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordFormat::SpanDenoise => "span_denoise",
            RecordFormat::Ic => "ic",
            RecordFormat::LabelDenoise => "label_denoise",
            RecordFormat::Finetune => "finetune",
            RecordFormat::LabelDenoiseFt => "label_denoise_ft",
            RecordFormat::JointIcsl => "joint_icsl",
        }
    }
}

impl std::str::FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecordFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown record format `{s}`")))
    }
}

impl std::fmt::Display for RecordFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub input: String,
    pub target: String,
    pub format: RecordFormat,
    pub source_id: String,
}

fn labeled_parts(
    example: &LabeledExample,
    cfg: &IntentTextConfig,
) -> Result<(String, NaturalLabel)> {
    example.require_labeled()?;
    let utterance = example.utterance.trim();
    if utterance.is_empty() {
        return Err(Error::InvalidExample {
            id: example.id.clone(),
            message: "utterance is empty".into(),
        });
    }
    if contains_sentinel(utterance) {
        return Err(Error::InvalidExample {
            id: example.id.clone(),
            message: "utterance contains a sentinel placeholder".into(),
        });
    }
    Ok((utterance.to_string(), natural_label(&example.intents, cfg)?))
}

/// Append a label (or sentinel) to an utterance as a new sentence. The
/// period is omitted when the utterance already ends a sentence.
pub fn concat_utterance_label(utterance: &str, label: &str) -> String {
    let utterance = utterance.trim_end();
    if utterance.ends_with(['.', '!', '?']) {
        format!("{utterance} {label}")
    } else {
        format!("{utterance}. {label}")
    }
}

/// Number of positions noised in a sequence of `n` tokens.
pub fn noise_count(n: usize, noise_rate: f64) -> usize {
    if noise_rate <= 0.0 || n == 0 {
        return 0;
    }
    ((noise_rate * n as f64).round() as usize).clamp(1, n)
}

/// Mask the sorted `positions` of `tokens`, merging adjacent positions into
/// spans. Returns `(input tokens, target tokens)`.
pub fn mask_positions(
    tokens: &[String],
    positions: &[usize],
    tok: &dyn Tokenizer,
) -> (Vec<String>, Vec<String>) {
    let mut input = Vec::with_capacity(tokens.len());
    let mut target = Vec::new();
    let mut span = 0;
    let mut prev: Option<usize> = None;
    let mut next = positions.iter().peekable();
    for (i, t) in tokens.iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            if prev.is_none_or(|p| p + 1 != i) {
                let s = tok.sentinel(span);
                input.push(s.clone());
                target.push(s);
                span += 1;
            }
            target.push(t.clone());
            prev = Some(i);
        } else {
            input.push(t.clone());
        }
    }
    (input, target)
}

/// Random span denoising over the utterance-label sequence.
pub fn make_span_denoise(
    example: &LabeledExample,
    tok: &dyn Tokenizer,
    noise_rate: f64,
    seed: u64,
    cfg: &IntentTextConfig,
) -> Result<PretrainRecord> {
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::InvalidArgument(format!(
            "noise rate {noise_rate} outside [0, 1)"
        )));
    }
    let (utterance, label) = labeled_parts(example, cfg)?;
    let tokens = tok.tokenize(&concat_utterance_label(&utterance, label.as_str()));
    let count = noise_count(tokens.len(), noise_rate);
    let mut rng = rng_for(seed, &example.id);
    let mut positions = sample(&mut rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let (input, target) = mask_positions(&tokens, &positions, tok);
    Ok(PretrainRecord {
        input: tok.detokenize(&input),
        target: tok.detokenize(&target),
        format: RecordFormat::SpanDenoise,
        source_id: example.id.clone(),
    })
}

fn label_denoise_with(
    example: &LabeledExample,
    tok: &dyn Tokenizer,
    cfg: &IntentTextConfig,
    format: RecordFormat,
) -> Result<PretrainRecord> {
    let (utterance, label) = labeled_parts(example, cfg)?;
    let mask = tok.sentinel(0);
    Ok(PretrainRecord {
        input: concat_utterance_label(&utterance, &mask),
        target: format!("{mask} {label}"),
        format,
        source_id: example.id.clone(),
    })
}

/// Mask the whole label and reconstruct it.
pub fn make_label_denoise(
    example: &LabeledExample,
    tok: &dyn Tokenizer,
    cfg: &IntentTextConfig,
) -> Result<PretrainRecord> {
    label_denoise_with(example, tok, cfg, RecordFormat::LabelDenoise)
}

/// Label denoising used as a fine-tuning format.
pub fn make_label_denoise_ft_record(
    example: &LabeledExample,
    tok: &dyn Tokenizer,
    cfg: &IntentTextConfig,
) -> Result<PretrainRecord> {
    label_denoise_with(example, tok, cfg, RecordFormat::LabelDenoiseFt)
}

fn prefixed(
    example: &LabeledExample,
    cfg: &IntentTextConfig,
    format: RecordFormat,
) -> Result<PretrainRecord> {
    let (utterance, label) = labeled_parts(example, cfg)?;
    Ok(PretrainRecord {
        input: format!("{IC_PREFIX}{utterance}"),
        target: label.into_string(),
        format,
        source_id: example.id.clone(),
    })
}

pub fn make_ic_record(example: &LabeledExample, cfg: &IntentTextConfig) -> Result<PretrainRecord> {
    prefixed(example, cfg, RecordFormat::Ic)
}

pub fn make_finetune_record(
    example: &LabeledExample,
    cfg: &IntentTextConfig,
) -> Result<PretrainRecord> {
    prefixed(example, cfg, RecordFormat::Finetune)
}

/// Model input used at prediction time for the fine-tuning format.
pub fn ic_input(utterance: &str) -> String {
    format!("{IC_PREFIX}{}", utterance.trim())
}

/// Bracketed parse target: `[ decorated utterance | intent ]`, each slot
/// rendered in place as `[ span | slot ]`.
pub fn joint_icsl_target(example: &LabeledExample, label: &NaturalLabel) -> Result<String> {
    example.validate()?;
    let chars: Vec<char> = example.utterance.chars().collect();
    let mut decorated = String::new();
    let mut cursor = 0;
    for span in example.sorted_slots() {
        decorated.extend(&chars[cursor..span.start]);
        let text: String = chars[span.start..span.end].iter().collect();
        decorated.push_str(&format!("[ {} | {} ]", text.trim(), span.label));
        cursor = span.end;
    }
    decorated.extend(&chars[cursor..]);
    let decorated = decorated.split_whitespace().collect::<Vec<_>>().join(" ");
    Ok(format!("[ {decorated} | {label} ]"))
}

pub fn make_joint_icsl_record(
    example: &LabeledExample,
    cfg: &IntentTextConfig,
) -> Result<PretrainRecord> {
    let (utterance, label) = labeled_parts(example, cfg)?;
    Ok(PretrainRecord {
        input: format!("{PARSE_PREFIX}{utterance}"),
        target: joint_icsl_target(example, &label)?,
        format: RecordFormat::JointIcsl,
        source_id: example.id.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct FormatOptions {
    pub intent_text: IntentTextConfig,
    pub noise_rate: f64,
    /// Global seed; per-example seeds derive from it and the example id.
    pub seed: u64,
    pub exec: Exec,
}

impl Default for FormatOptions {
    fn default() -> Self {
        FormatOptions {
            intent_text: IntentTextConfig::default(),
            noise_rate: DEFAULT_NOISE_RATE,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

pub fn format_example(
    example: &LabeledExample,
    format: RecordFormat,
    tok: &dyn Tokenizer,
    opts: &FormatOptions,
) -> Result<PretrainRecord> {
    let cfg = &opts.intent_text;
    match format {
        RecordFormat::SpanDenoise => {
            make_span_denoise(example, tok, opts.noise_rate, opts.seed, cfg)
        }
        RecordFormat::Ic => make_ic_record(example, cfg),
        RecordFormat::LabelDenoise => make_label_denoise(example, tok, cfg),
        RecordFormat::Finetune => make_finetune_record(example, cfg),
        RecordFormat::LabelDenoiseFt => make_label_denoise_ft_record(example, tok, cfg),
        RecordFormat::JointIcsl => make_joint_icsl_record(example, cfg),
    }
}

/// Format a whole corpus, one record per example, in input order.
pub fn format_corpus(
    examples: &[LabeledExample],
    format: RecordFormat,
    tok: &dyn Tokenizer,
    opts: &FormatOptions,
) -> Result<Vec<PretrainRecord>> {
    opts.exec
        .try_map(examples, |e| format_example(e, format, tok, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Quality, SlotSpan};
    use crate::tokenizer::{sentinel, WhitespaceTokenizer};

    fn ex(utt: &str, intents: &[&str]) -> LabeledExample {
        LabeledExample::labeled(
            "e1",
            utt,
            intents.iter().map(|s| s.to_string()).collect(),
            Quality::Gold,
            "t",
        )
    }

    fn cfg() -> IntentTextConfig {
        IntentTextConfig::with_prefixes(["atis_"])
    }

    #[test]
    fn zero_noise_keeps_sequence() {
        let r = make_span_denoise(
            &ex("book a flight", &["BookFlight"]),
            &WhitespaceTokenizer,
            0.0,
            1,
            &cfg(),
        )
        .unwrap();
        assert_eq!(r.input, "book a flight. Book flight");
        assert_eq!(r.target, "");
    }

    #[test]
    fn noise_count_rounds_with_floor_of_one() {
        assert_eq!(noise_count(20, 0.15), 3);
        assert_eq!(noise_count(3, 0.15), 1);
        assert_eq!(noise_count(10, 0.0), 0);
        assert_eq!(noise_count(1, 0.99), 1);
    }

    #[test]
    fn twenty_tokens_get_three_masked() {
        let utt = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen";
        let r = make_span_denoise(
            &ex(utt, &["BookFlight"]),
            &WhitespaceTokenizer,
            0.15,
            9,
            &cfg(),
        )
        .unwrap();
        let masked = r
            .target
            .split_whitespace()
            .filter(|t| !t.starts_with("⟨mask_"))
            .count();
        assert_eq!(masked, 3);
    }

    #[test]
    fn adjacent_positions_merge() {
        let tokens: Vec<String> = "a b c d e f g h i j".split(' ').map(String::from).collect();
        let (input, target) = mask_positions(&tokens, &[2, 3, 7], &WhitespaceTokenizer);
        assert_eq!(
            input.join(" "),
            format!("a b {} e f g {} i j", sentinel(0), sentinel(1))
        );
        assert_eq!(
            target.join(" "),
            format!("{} c d {} h", sentinel(0), sentinel(1))
        );
        let (input, target) = mask_positions(&tokens, &[0], &WhitespaceTokenizer);
        assert_eq!(input[0], sentinel(0));
        assert_eq!(target, vec![sentinel(0), "a".to_string()]);
    }

    #[test]
    fn label_denoise_records() {
        let e = ex("Find me a hotel in NYC", &["BookHotel"]);
        let r = make_label_denoise(&e, &WhitespaceTokenizer, &cfg()).unwrap();
        assert_eq!(r.input, "Find me a hotel in NYC. ⟨mask_0⟩");
        assert_eq!(r.target, "⟨mask_0⟩ Book hotel");
        assert_eq!(r.format, RecordFormat::LabelDenoise);
        assert_eq!(
            r,
            make_label_denoise(&e, &WhitespaceTokenizer, &cfg()).unwrap()
        );

        let multi = make_label_denoise(
            &ex("fares to boston", &["atis_flight", "atis_airfare"]),
            &WhitespaceTokenizer,
            &cfg(),
        )
        .unwrap();
        assert_eq!(multi.target, "⟨mask_0⟩ Flight # airfare");

        let ft = make_label_denoise_ft_record(&e, &WhitespaceTokenizer, &cfg()).unwrap();
        assert_eq!(ft.format, RecordFormat::LabelDenoiseFt);
        assert_ne!(ft.format, r.format);
        assert_eq!(
            (ft.input.as_str(), ft.target.as_str()),
            (r.input.as_str(), r.target.as_str())
        );
        assert_eq!(ft.target.strip_prefix("⟨mask_0⟩ ").unwrap(), "Book hotel");
    }

    #[test]
    fn sentence_final_punctuation_is_not_doubled() {
        assert_eq!(
            concat_utterance_label("Fly me to Baltimore.", "X"),
            "Fly me to Baltimore. X"
        );
        assert_eq!(concat_utterance_label("Fly me", "X"), "Fly me. X");
    }

    #[test]
    fn ic_and_finetune_records() {
        let e = ex("Find me a flight from NYC to Baltimore.", &["BookFlight"]);
        let ic = make_ic_record(&e, &cfg()).unwrap();
        assert_eq!(
            ic.input,
            "intent classification: Find me a flight from NYC to Baltimore."
        );
        assert_eq!(ic.target, "Book flight");
        let ft = make_finetune_record(&e, &cfg()).unwrap();
        assert_eq!(ft.format, RecordFormat::Finetune);
        assert_eq!((ft.input, ft.target), (ic.input, ic.target));

        assert!(make_ic_record(&ex("   ", &["X"]), &cfg()).is_err());
        let unlabeled = LabeledExample::unlabeled("u", "hi", "t");
        assert!(matches!(
            make_finetune_record(&unlabeled, &cfg()),
            Err(Error::Unlabeled { .. })
        ));
        assert!(make_span_denoise(&unlabeled, &WhitespaceTokenizer, 0.15, 0, &cfg()).is_err());
    }

    #[test]
    fn joint_icsl() {
        let e = ex("book a flight to boston", &["BookFlight"]).with_slots(vec![SlotSpan {
            start: 17,
            end: 23,
            label: "dest".into(),
        }]);
        let r = make_joint_icsl_record(&e, &cfg()).unwrap();
        assert_eq!(r.input, "semantic parse: book a flight to boston");
        assert_eq!(
            r.target,
            "[ book a flight to [ boston | dest ] | Book flight ]"
        );

        let plain = make_joint_icsl_record(&ex("hello there", &["Greet"]), &cfg()).unwrap();
        assert_eq!(plain.target, "[ hello there | Greet ]");

        let spans = vec![
            SlotSpan {
                start: 17,
                end: 23,
                label: "dest".into(),
            },
            SlotSpan {
                start: 0,
                end: 4,
                label: "act".into(),
            },
        ];
        let mut reversed = spans.clone();
        reversed.reverse();
        let a = make_joint_icsl_record(
            &ex("book a flight to boston", &["BookFlight"]).with_slots(spans),
            &cfg(),
        )
        .unwrap();
        let b = make_joint_icsl_record(
            &ex("book a flight to boston", &["BookFlight"]).with_slots(reversed),
            &cfg(),
        )
        .unwrap();
        assert_eq!(a.target, b.target);
        assert_eq!(
            a.target,
            "[ [ book | act ] a flight to [ boston | dest ] | Book flight ]"
        );

        let overlapping = ex("book a flight", &["BookFlight"]).with_slots(vec![
            SlotSpan {
                start: 0,
                end: 6,
                label: "a".into(),
            },
            SlotSpan {
                start: 5,
                end: 8,
                label: "b".into(),
            },
        ]);
        assert!(make_joint_icsl_record(&overlapping, &cfg()).is_err());
    }

    #[test]
    fn format_names_roundtrip() {
        for f in RecordFormat::ALL {
            assert_eq!(f.as_str().parse::<RecordFormat>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
        }
    }
}
