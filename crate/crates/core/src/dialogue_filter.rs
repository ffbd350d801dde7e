//! Intentfulness filtering: build the binary training set from dialogue-act
//! annotated corpora, train and apply the classifier, threshold scores, and
//! audit precision on a human-judged sample.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierBackend, ClassifierParams};
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::rng;

pub const INTENTFUL: &str = "intentful";
pub const NON_INTENTFUL: &str = "non_intentful";
/// Probability at or above which an utterance counts as tagged intentful.
pub const POSITIVE_CUTOFF: f64 = 0.5;
pub const DEFAULT_AUDIT_SIZE: usize = 150;
const SCORE_BATCH: usize = 256;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterLabels {
    /// Greetings, goodbyes, thanks and similar generic intents.
    #[serde(default)]
    pub generic_intents: BTreeSet<String>,
    #[serde(default)]
    pub ood_intents: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterExample {
    pub utterance: String,
    pub intentful: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterTrainingSet {
    pub examples: Vec<FilterExample>,
    pub dropped_unlabeled: usize,
    pub dropped_ood: usize,
    /// SGD utterances tagged neither INFORM nor REQUEST.
    pub dropped_untagged: usize,
}

/// MultiDoGO: all intents generic -> negative, any out-of-domain intent ->
/// dropped, otherwise positive. SGD: any REQUEST tag -> positive, otherwise
/// any INFORM tag -> negative, otherwise dropped.
pub fn build_filter_training_set(
    multidogo: &[LabeledExample],
    sgd: &[LabeledExample],
    labels: &FilterLabels,
    seed: u64,
) -> FilterTrainingSet {
    let mut out = FilterTrainingSet::default();
    for e in multidogo {
        if !e.is_labeled() {
            out.dropped_unlabeled += 1;
        } else if e.intents.iter().any(|i| labels.ood_intents.contains(i)) {
            out.dropped_ood += 1;
        } else {
            let generic = e.intents.iter().all(|i| labels.generic_intents.contains(i));
            out.examples.push(FilterExample {
                utterance: e.utterance.clone(),
                intentful: !generic,
            });
        }
    }
    for e in sgd {
        if !e.is_labeled() {
            out.dropped_unlabeled += 1;
        } else if e.intents.iter().any(|i| i.contains("REQUEST")) {
            out.examples.push(FilterExample {
                utterance: e.utterance.clone(),
                intentful: true,
            });
        } else if e.intents.iter().any(|i| i.contains("INFORM")) {
            out.examples.push(FilterExample {
                utterance: e.utterance.clone(),
                intentful: false,
            });
        } else {
            out.dropped_untagged += 1;
        }
    }
    out.examples.shuffle(&mut rng(seed));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMetrics {
    pub size: usize,
    pub accuracy: f64,
    /// Precision of the intentful class; 0 when nothing was predicted positive.
    pub precision: f64,
}

pub struct TrainedFilter<H> {
    pub handle: H,
    pub holdout: HoldoutMetrics,
}

/// Stratified 10% hold-out: per class, `max(1, n/10)` examples when the
/// class has at least two, none otherwise.
fn stratified_holdout(set: &[FilterExample], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    let mut r = rng(seed);
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..set.len())
            .filter(|&i| set[i].intentful == class)
            .collect();
        idx.shuffle(&mut r);
        let n_held = if idx.len() >= 2 {
            (idx.len() / 10).max(1)
        } else {
            0
        };
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

fn class_name(intentful: bool) -> String {
    if intentful { INTENTFUL } else { NON_INTENTFUL }.to_string()
}

pub fn train_intentfulness<B: ClassifierBackend>(
    backend: &B,
    set: &[FilterExample],
    params: &ClassifierParams,
) -> Result<TrainedFilter<B::Handle>> {
    if set.is_empty() {
        return Err(Error::Empty("intentfulness training set"));
    }
    let positives = set.iter().filter(|e| e.intentful).count();
    if positives == 0 || positives == set.len() {
        return Err(Error::SingleClass(class_name(positives > 0)));
    }
    let (train_idx, held_idx) = stratified_holdout(set, params.seed);
    let texts: Vec<String> = train_idx
        .iter()
        .map(|&i| set[i].utterance.clone())
        .collect();
    let labels: Vec<String> = train_idx
        .iter()
        .map(|&i| class_name(set[i].intentful))
        .collect();
    let handle = backend.train(&texts, &labels, params)?;

    let held_texts: Vec<String> = held_idx.iter().map(|&i| set[i].utterance.clone()).collect();
    let probs = positive_probabilities(backend, &handle, &held_texts)?;
    let (mut correct, mut tp, mut pp) = (0usize, 0usize, 0usize);
    for (&i, p) in held_idx.iter().zip(&probs) {
        let pred = *p >= POSITIVE_CUTOFF;
        correct += (pred == set[i].intentful) as usize;
        pp += pred as usize;
        tp += (pred && set[i].intentful) as usize;
    }
    let n = held_idx.len();
    let holdout = HoldoutMetrics {
        size: n,
        accuracy: if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        },
        precision: if pp == 0 { 0.0 } else { tp as f64 / pp as f64 },
    };
    log::info!("intentfulness hold-out: {holdout:?}");
    Ok(TrainedFilter { handle, holdout })
}

fn positive_probabilities<B: ClassifierBackend>(
    backend: &B,
    handle: &B::Handle,
    texts: &[String],
) -> Result<Vec<f64>> {
    let col = backend
        .classes(handle)
        .iter()
        .position(|c| c == INTENTFUL)
        .ok_or_else(|| Error::InvalidArgument(format!("classifier has no `{INTENTFUL}` class")))?;
    Ok(backend
        .predict_proba(handle, texts)?
        .into_iter()
        .map(|row| row[col])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub example: LabeledExample,
    pub p_intentful: f64,
}

/// Score utterances in batches; output order matches input order.
pub fn score_utterances<B: ClassifierBackend>(
    backend: &B,
    handle: &B::Handle,
    utterances: &[LabeledExample],
    exec: Exec,
) -> Result<Vec<ScoredUtterance>> {
    let batches: Vec<&[LabeledExample]> = utterances.chunks(SCORE_BATCH).collect();
    let scored = exec.try_map_indexed(&batches, |bi, batch| {
        let texts: Vec<String> = batch.iter().map(|e| e.utterance.clone()).collect();
        let probs =
            positive_probabilities(backend, handle, &texts).map_err(|e| Error::backend(bi, e))?;
        if probs.len() != batch.len() {
            return Err(Error::backend(
                bi,
                format!("expected {} scores, got {}", batch.len(), probs.len()),
            ));
        }
        probs
            .into_iter()
            .zip(batch.iter())
            .map(|(p, e)| {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::backend(
                        bi,
                        format!("probability {p} outside [0, 1]"),
                    ));
                }
                Ok(ScoredUtterance {
                    example: e.clone(),
                    p_intentful: p,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(scored.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Keep `p >= 0.5`.
    AcceptAllPositive,
    /// Keep `p >=` the median score of the `p >= 0.5` subset.
    MedianOfPositives,
    /// Keep `p >= tau`.
    Fixed(f64),
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThresholdPolicy::Fixed(t) if !(0.0..=1.0).contains(t) => Err(Error::InvalidArgument(
                format!("fixed threshold {t} outside [0, 1]"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Cutoff implied by a policy on a set of scores.
pub fn threshold_for(scored: &[ScoredUtterance], policy: ThresholdPolicy) -> Result<f64> {
    policy.validate()?;
    match policy {
        ThresholdPolicy::AcceptAllPositive => Ok(POSITIVE_CUTOFF),
        ThresholdPolicy::Fixed(t) => Ok(t),
        ThresholdPolicy::MedianOfPositives => {
            let positives: Vec<f64> = scored
                .iter()
                .map(|s| s.p_intentful)
                .filter(|&p| p >= POSITIVE_CUTOFF)
                .collect();
            median(&positives).ok_or(Error::Empty("positive-tagged subset for median threshold"))
        }
    }
}

/// Keep examples scoring at or above the policy's cutoff, in input order.
pub fn apply_threshold(
    scored: &[ScoredUtterance],
    policy: ThresholdPolicy,
) -> Result<Vec<LabeledExample>> {
    let cutoff = threshold_for(scored, policy)?;
    Ok(scored
        .iter()
        .filter(|s| s.p_intentful >= cutoff)
        .map(|s| s.example.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditItem {
    pub id: String,
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub id: String,
    pub intentful: bool,
}

/// Uniform sample without replacement; the whole set when it is smaller
/// than `sample_size`. Items come back in corpus order.
pub fn audit_sample(filtered: &[LabeledExample], sample_size: usize, seed: u64) -> Vec<AuditItem> {
    let n = sample_size.min(filtered.len());
    let mut idx = sample(&mut rng(seed), filtered.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| AuditItem {
            id: filtered[i].id.clone(),
            utterance: filtered[i].utterance.clone(),
        })
        .collect()
}

/// Fraction of the audit sample judged intentful.
pub fn audit_precision(
    filtered: &[LabeledExample],
    sample_size: usize,
    seed: u64,
    judgments: &HashMap<String, bool>,
) -> Result<f64> {
    let items = audit_sample(filtered, sample_size, seed);
    if items.is_empty() {
        return Err(Error::Empty("audit sample"));
    }
    let missing: Vec<String> = items
        .iter()
        .filter(|i| !judgments.contains_key(&i.id))
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingJudgments(missing));
    }
    let yes = items.iter().filter(|i| judgments[&i.id]).count();
    Ok(yes as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::BagOfWordsClassifier;
    use crate::corpus::Quality;

    fn ex(id: &str, utt: &str, intents: &[&str]) -> LabeledExample {
        LabeledExample::labeled(
            id,
            utt,
            intents.iter().map(|s| s.to_string()).collect(),
            Quality::Gold,
            "t",
        )
    }

    fn scored(ps: &[f64]) -> Vec<ScoredUtterance> {
        ps.iter()
            .enumerate()
            .map(|(i, &p)| ScoredUtterance {
                example: ex(&format!("s{i}"), &format!("u{i}"), &["X"]),
                p_intentful: p,
            })
            .collect()
    }

    fn labels() -> FilterLabels {
        FilterLabels {
            generic_intents: ["thankYou", "greeting"]
                .into_iter()
                .map(String::from)
                .collect(),
            ood_intents: ["outOfDomain"].into_iter().map(String::from).collect(),
        }
    }

    #[test]
    fn training_set_rules() {
        let mdg = vec![
            ex("a", "thanks a lot", &["thankYou"]),
            ex("b", "i need a new card", &["orderCard"]),
            ex("c", "what is the meaning of life", &["outOfDomain"]),
            LabeledExample::unlabeled("d", "hmm", "t"),
        ];
        let sgd = vec![
            ex("e", "get me a ride", &["REQUEST_ride"]),
            ex("f", "i am in boston", &["INFORM_location"]),
            ex("g", "ok", &["AFFIRM"]),
        ];
        let set = build_filter_training_set(&mdg, &sgd, &labels(), 0);
        let by_utt: HashMap<&str, bool> = set
            .examples
            .iter()
            .map(|e| (e.utterance.as_str(), e.intentful))
            .collect();
        assert_eq!(by_utt.len(), 4);
        assert!(!by_utt["thanks a lot"]);
        assert!(by_utt["i need a new card"]);
        assert!(by_utt["get me a ride"]);
        assert!(!by_utt["i am in boston"]);
        assert_eq!(
            (set.dropped_ood, set.dropped_unlabeled, set.dropped_untagged),
            (1, 1, 1)
        );
        assert_eq!(set, build_filter_training_set(&mdg, &sgd, &labels(), 0));
    }

    #[test]
    fn sgd_tags_are_case_sensitive() {
        let set =
            build_filter_training_set(&[], &[ex("x", "hey", &["request_ride"])], &labels(), 0);
        assert!(set.examples.is_empty());
    }

    fn toy_set() -> Vec<FilterExample> {
        let verbs = [
            "book", "order", "cancel", "find", "play", "send", "call", "reserve", "buy", "check",
        ];
        let mut out = Vec::new();
        for i in 0..100 {
            out.push(FilterExample {
                utterance: format!("please {} the thing {i}", verbs[i % verbs.len()]),
                intentful: true,
            });
            out.push(FilterExample {
                utterance: format!("hello there {i}"),
                intentful: false,
            });
        }
        out
    }

    #[test]
    fn separable_toy_set_reaches_high_precision() {
        let backend = BagOfWordsClassifier::default();
        let trained =
            train_intentfulness(&backend, &toy_set(), &ClassifierParams::default()).unwrap();
        assert_eq!(trained.holdout.size, 20);
        assert!(trained.holdout.precision >= 0.9, "{:?}", trained.holdout);

        let probe = vec![
            ex("p", "please book a cab", &["X"]),
            ex("q", "lol nice", &["X"]),
            ex("r", "lol nice", &["X"]),
        ];
        let s = score_utterances(&backend, &trained.handle, &probe, Exec::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|s| (0.0..=1.0).contains(&s.p_intentful)));
        assert!(s[0].p_intentful > s[1].p_intentful);
        assert_eq!(s[1].p_intentful, s[2].p_intentful);
    }

    #[test]
    fn training_rejects_degenerate_sets() {
        let backend = BagOfWordsClassifier::default();
        assert!(matches!(
            train_intentfulness(&backend, &[], &ClassifierParams::default()),
            Err(Error::Empty(_))
        ));
        let all_pos: Vec<FilterExample> = toy_set().into_iter().filter(|e| e.intentful).collect();
        assert!(matches!(
            train_intentfulness(&backend, &all_pos, &ClassifierParams::default()),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn median_policy_keeps_upper_half_inclusive() {
        let s = scored(&[0.9, 0.8, 0.7, 0.6, 0.55]);
        let kept = apply_threshold(&s, ThresholdPolicy::MedianOfPositives).unwrap();
        assert_eq!(
            kept.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(),
            vec!["s0", "s1", "s2"]
        );
    }

    #[test]
    fn median_ignores_non_positive_scores() {
        let s = scored(&[0.1, 0.9, 0.3, 0.7]);
        assert_eq!(
            threshold_for(&s, ThresholdPolicy::MedianOfPositives).unwrap(),
            0.8
        );
        let kept = apply_threshold(&s, ThresholdPolicy::MedianOfPositives).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn ties_at_median_are_kept() {
        let s = scored(&[0.6; 5]);
        assert_eq!(
            apply_threshold(&s, ThresholdPolicy::MedianOfPositives)
                .unwrap()
                .len(),
            5
        );
    }

    #[test]
    fn other_policies() {
        let s = scored(&[0.2, 0.5, 0.49, 1.0]);
        assert_eq!(
            apply_threshold(&s, ThresholdPolicy::Fixed(0.0))
                .unwrap()
                .len(),
            4
        );
        assert_eq!(
            apply_threshold(&s, ThresholdPolicy::AcceptAllPositive)
                .unwrap()
                .len(),
            2
        );
        assert_eq!(
            apply_threshold(&s, ThresholdPolicy::Fixed(1.0))
                .unwrap()
                .len(),
            1
        );
        assert!(apply_threshold(&s, ThresholdPolicy::Fixed(1.5)).is_err());
        assert!(matches!(
            apply_threshold(&scored(&[0.1, 0.2]), ThresholdPolicy::MedianOfPositives),
            Err(Error::Empty(_))
        ));
    }

    fn filtered(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| ex(&format!("f{i}"), &format!("utt {i}"), &["X"]))
            .collect()
    }

    #[test]
    fn audit_precision_counts_judgments() {
        let data = filtered(400);
        let sample = audit_sample(&data, 150, 42);
        assert_eq!(sample.len(), 150);
        assert_eq!(sample, audit_sample(&data, 150, 42));
        let judgments: HashMap<String, bool> = sample
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i < 137))
            .collect();
        let p = audit_precision(&data, 150, 42, &judgments).unwrap();
        assert!((p - 137.0 / 150.0).abs() < 1e-12);
        assert_eq!((p * 100.0).round(), 91.0);
    }

    #[test]
    fn audit_small_set_and_missing() {
        let data = filtered(4);
        let all_true: HashMap<String, bool> = data.iter().map(|e| (e.id.clone(), true)).collect();
        assert_eq!(audit_precision(&data, 10, 0, &all_true).unwrap(), 1.0);
        let mut half: HashMap<String, bool> = HashMap::new();
        half.insert("f0".into(), false);
        half.insert("f1".into(), true);
        half.insert("f2".into(), true);
        half.insert("f3".into(), false);
        assert_eq!(audit_precision(&data, 10, 0, &half).unwrap(), 0.5);
        half.remove("f3");
        match audit_precision(&data, 10, 0, &half).unwrap_err() {
            Error::MissingJudgments(ids) => assert_eq!(ids, vec!["f3".to_string()]),
            e => panic!("{e}"),
        }
    }
}
