//! Discriminative text classifier contract and a hashed bag-of-n-grams
//! softmax regression implementing it.
//!
//! The intentfulness filter trains a two-class model through this contract;
//! the runner uses it for a discriminative baseline next to the generative
//! backend.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::rng;

pub trait ClassifierBackend: Sync {
    type Handle: Send + Sync;

    fn train(
        &self,
        texts: &[String],
        labels: &[String],
        params: &ClassifierParams,
    ) -> Result<Self::Handle>;

    /// Class names in the column order used by [`ClassifierBackend::predict_proba`].
    fn classes<'a>(&self, handle: &'a Self::Handle) -> &'a [String];

    /// One probability row per text.
    fn predict_proba(&self, handle: &Self::Handle, texts: &[String]) -> Result<Vec<Vec<f64>>>;

    /// Arg-max class per text.
    fn predict(&self, handle: &Self::Handle, texts: &[String]) -> Result<Vec<String>> {
        let classes = self.classes(handle);
        Ok(self
            .predict_proba(handle, texts)?
            .into_iter()
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
                    )
                    .0;
                classes[best].clone()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    /// log2 of the hashed feature space.
    pub feature_bits: u32,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            epochs: 10,
            learning_rate: 0.5,
            l2: 1e-6,
            seed: 0,
            feature_bits: 16,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Hashed unigram + bigram features of lowercased whitespace tokens, plus a
/// bias feature at index 0.
pub fn featurize(text: &str, bits: u32) -> Vec<usize> {
    let buckets = (1usize << bits) - 1;
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
    let mut feats = vec![0];
    for w in &words {
        feats.push(1 + (fnv1a(w.as_bytes()) as usize % buckets));
    }
    for pair in words.windows(2) {
        let key = format!("{} {}", pair[0], pair[1]);
        feats.push(1 + (fnv1a(key.as_bytes()) as usize % buckets));
    }
    feats
}

/// Softmax regression over hashed n-gram features, trained with SGD.
#[derive(Debug, Clone, Copy, Default)]
pub struct BagOfWordsClassifier {
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: Vec<String>,
    pub feature_bits: u32,
    /// Row-major `[feature][class]`.
    pub weights: Vec<f32>,
}

impl LinearModel {
    fn proba(&self, feats: &[usize]) -> Vec<f64> {
        let c = self.classes.len();
        let mut logits = vec![0f64; c];
        for &f in feats {
            let row = &self.weights[f * c..(f + 1) * c];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += *w as f64;
            }
        }
        softmax(&logits)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl ClassifierBackend for BagOfWordsClassifier {
    type Handle = LinearModel;

    fn train(
        &self,
        texts: &[String],
        labels: &[String],
        params: &ClassifierParams,
    ) -> Result<LinearModel> {
        if texts.is_empty() {
            return Err(Error::Empty("classifier training set"));
        }
        if texts.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} texts but {} labels",
                texts.len(),
                labels.len()
            )));
        }
        let classes: Vec<String> = labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if classes.len() < 2 {
            return Err(Error::SingleClass(classes[0].clone()));
        }
        let c = classes.len();
        let y: Vec<usize> = labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label collected above"))
            .collect();
        let feats = self.exec.map(texts, |t| featurize(t, params.feature_bits));
        let mut model = LinearModel {
            classes,
            feature_bits: params.feature_bits,
            weights: vec![0.0; (1usize << params.feature_bits) * c],
        };
        let mut order: Vec<usize> = (0..texts.len()).collect();
        let mut rng = rng(params.seed);
        for epoch in 0..params.epochs {
            order.shuffle(&mut rng);
            let lr = params.learning_rate / (1.0 + epoch as f64);
            for &i in &order {
                let p = model.proba(&feats[i]);
                let scale = 1.0 / (feats[i].len() as f64).sqrt();
                for &f in &feats[i] {
                    let row = &mut model.weights[f * c..(f + 1) * c];
                    for (j, w) in row.iter_mut().enumerate() {
                        let grad = p[j] - if j == y[i] { 1.0 } else { 0.0 };
                        *w -= (lr * (grad * scale + params.l2 * *w as f64)) as f32;
                    }
                }
            }
        }
        Ok(model)
    }

    fn classes<'a>(&self, handle: &'a LinearModel) -> &'a [String] {
        &handle.classes
    }

    fn predict_proba(&self, handle: &LinearModel, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .exec
            .map(texts, |t| handle.proba(&featurize(t, handle.feature_bits))))
    }
}
