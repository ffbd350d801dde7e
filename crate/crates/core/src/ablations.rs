//! Label-semantics ablations and pre-train/eval overlap analyses.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::intent_text::{natural_label, IntentTextConfig, NaturalLabel};
use crate::rng::{rng, rng_for};

/// Reassign intent lists to utterances by a seeded uniform permutation. The
/// multiset of intent lists and the utterance order are unchanged.
pub fn shuffle_pretrain_labels(
    corpus: &[LabeledExample],
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    for e in corpus {
        e.require_labeled()?;
    }
    let mut intents: Vec<Vec<String>> = corpus.iter().map(|e| e.intents.clone()).collect();
    intents.shuffle(&mut rng(seed));
    Ok(corpus
        .iter()
        .zip(intents)
        .map(|(e, intents)| LabeledExample {
            intents,
            ..e.clone()
        })
        .collect())
}

/// A derangement of a label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRemap {
    pub mapping: BTreeMap<String, String>,
}

impl LabelRemap {
    /// Build from a mapping, checking bijectivity and absence of fixed points.
    pub fn new(mapping: BTreeMap<String, String>) -> Result<Self> {
        let image: BTreeSet<&String> = mapping.values().collect();
        let domain: BTreeSet<&String> = mapping.keys().collect();
        if image != domain {
            return Err(Error::InvalidArgument(
                "label remap is not a bijection on its label set".into(),
            ));
        }
        if let Some((k, _)) = mapping.iter().find(|(k, v)| k == v) {
            return Err(Error::InvalidArgument(format!("label remap fixes `{k}`")));
        }
        Ok(LabelRemap { mapping })
    }

    pub fn map<'a>(&'a self, label: &'a str) -> &'a str {
        self.mapping.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn inverse(&self) -> LabelRemap {
        LabelRemap {
            mapping: self
                .mapping
                .iter()
                .map(|(k, v)| (v.clone(), k.clone()))
                .collect(),
        }
    }

    pub fn apply(&self, examples: &[LabeledExample]) -> Vec<LabeledExample> {
        examples
            .iter()
            .map(|e| LabeledExample {
                intents: e.intents.iter().map(|i| self.map(i).to_string()).collect(),
                ..e.clone()
            })
            .collect()
    }
}

/// Uniform random derangement of `labels` by rejection sampling.
pub fn random_derangement(labels: &[String], seed: u64) -> Result<LabelRemap> {
    if labels.len() < 2 {
        return Err(Error::NoDerangement(labels.len()));
    }
    let mut r = rng(seed);
    let mut image = labels.to_vec();
    loop {
        image.shuffle(&mut r);
        if labels.iter().zip(&image).all(|(a, b)| a != b) {
            let mapping = labels.iter().cloned().zip(image).collect();
            return LabelRemap::new(mapping);
        }
    }
}

/// Systematically replace every intent in train and test by a derangement
/// over their joint label set.
pub fn remap_eval_labels(
    train: &[LabeledExample],
    test: &[LabeledExample],
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>, LabelRemap)> {
    let labels: Vec<String> = train
        .iter()
        .chain(test)
        .flat_map(|e| e.intents.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let remap = random_derangement(&labels, seed)?;
    Ok((remap.apply(train), remap.apply(test), remap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapCount {
    pub count: usize,
    pub fraction: f64,
}

impl OverlapCount {
    fn new(count: usize, total: usize) -> Self {
        OverlapCount {
            count,
            fraction: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        }
    }
}

fn example_label(e: &LabeledExample, cfg: &IntentTextConfig) -> Option<String> {
    if !e.is_labeled() {
        return None;
    }
    natural_label(&e.intents, cfg)
        .ok()
        .map(|l| l.as_str().to_lowercase())
}

/// Pre-train examples whose label equals an eval intent or contains one as
/// a substring, case-insensitively.
pub fn intent_overlap_report(
    pretrain: &[LabeledExample],
    eval_intents: &[NaturalLabel],
    cfg: &IntentTextConfig,
) -> OverlapCount {
    let needles: Vec<String> = eval_intents
        .iter()
        .map(|l| l.as_str().to_lowercase())
        .collect();
    let count = pretrain
        .iter()
        .filter_map(|e| example_label(e, cfg))
        .filter(|label| needles.iter().any(|n| label.contains(n.as_str())))
        .count();
    OverlapCount::new(count, pretrain.len())
}

fn label_words(label: &str, stopwords: &HashSet<String>) -> Vec<String> {
    label
        .split_whitespace()
        .filter(|w| *w != "#")
        .map(str::to_lowercase)
        .filter(|w| !stopwords.contains(w))
        .collect()
}

/// Pre-train examples whose label shares at least one word with any eval
/// intent. `stopwords` are ignored on both sides.
pub fn lexical_overlap_report(
    pretrain: &[LabeledExample],
    eval_intents: &[NaturalLabel],
    stopwords: &HashSet<String>,
    cfg: &IntentTextConfig,
) -> OverlapCount {
    let vocab: HashSet<String> = eval_intents
        .iter()
        .flat_map(|l| label_words(l.as_str(), stopwords))
        .collect();
    let count = pretrain
        .iter()
        .filter_map(|e| example_label(e, cfg))
        .filter(|label| {
            label_words(label, stopwords)
                .iter()
                .any(|w| vocab.contains(w))
        })
        .count();
    OverlapCount::new(count, pretrain.len())
}

/// Fixed-length sentence embeddings.
pub trait SentenceEncoder: Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Word-count vectors over a fixed vocabulary of lowercased whitespace
/// tokens; out-of-vocabulary words are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagOfWordsEncoder {
    pub vocab: BTreeMap<String, usize>,
}

impl BagOfWordsEncoder {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        BagOfWordsEncoder {
            vocab: words.into_iter().enumerate().map(|(i, w)| (w, i)).collect(),
        }
    }
}

impl SentenceEncoder for BagOfWordsEncoder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0f32; self.vocab.len()];
                for w in t.split_whitespace() {
                    if let Some(&i) = self.vocab.get(&w.to_lowercase()) {
                        v[i] += 1.0;
                    }
                }
                v
            })
            .collect())
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarPair {
    pub pretrain: String,
    pub eval: String,
    pub score: f64,
}

pub const DEFAULT_PER_INTENT_SAMPLE: usize = 5;

/// Seeded sample of up to `per_intent` utterances from every eval class,
/// classes in first-appearance order.
pub fn sample_per_intent(eval: &[LabeledExample], per_intent: usize, seed: u64) -> Vec<String> {
    let mut groups: Vec<(String, Vec<&LabeledExample>)> = Vec::new();
    for e in eval {
        let key = e.class_key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(e),
            None => groups.push((key, vec![e])),
        }
    }
    let mut out = Vec::new();
    for (key, members) in groups {
        let n = per_intent.min(members.len());
        let mut idx = sample(&mut rng_for(seed, &key), members.len(), n).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| members[i].utterance.clone()));
    }
    out
}

/// Top `top_n` most similar (pre-train, sampled eval) utterance pairs by
/// cosine of their embeddings, sorted by descending score.
pub fn semantic_similarity_report<E: SentenceEncoder>(
    encoder: &E,
    pretrain: &[String],
    eval: &[LabeledExample],
    per_intent_sample: usize,
    top_n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<SimilarPair>> {
    let sampled = sample_per_intent(eval, per_intent_sample, seed);
    let pre_emb = encoder.embed(pretrain)?;
    let eval_emb = encoder.embed(&sampled)?;
    let mut pairs: Vec<(f64, usize, usize)> = exec
        .map_indexed(&pre_emb, |i, p| {
            let mut best: Vec<(f64, usize, usize)> = eval_emb
                .iter()
                .enumerate()
                .map(|(j, q)| (cosine(p, q), i, j))
                .collect();
            best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
            best.truncate(top_n);
            best
        })
        .into_iter()
        .flatten()
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs.truncate(top_n);
    Ok(pairs
        .into_iter()
        .map(|(score, i, j)| SimilarPair {
            pretrain: pretrain[i].clone(),
            eval: sampled[j].clone(),
            score,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub exact_or_substring: OverlapCount,
    pub lexical: OverlapCount,
    pub top_similar: Vec<SimilarPair>,
}
