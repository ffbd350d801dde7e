//! Seq2seq intent labeler: trained on gold and silver data, applied to
//! filtered utterances to produce bronze examples.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{Hyperparams, Seq2SeqBackend};
use crate::corpus::{LabeledExample, Quality};
use crate::error::{Error, Result};
use crate::formats::{ic_input, PretrainRecord, RecordFormat, IC_PREFIX};
use crate::intent_text::{natural_label, normalize_label, IntentTextConfig, NaturalLabel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorTrainingPair {
    pub input: String,
    pub target: String,
    pub source_id: String,
}

impl GeneratorTrainingPair {
    pub fn to_record(&self) -> PretrainRecord {
        PretrainRecord {
            input: self.input.clone(),
            target: self.target.clone(),
            format: RecordFormat::Ic,
            source_id: self.source_id.clone(),
        }
    }
}

pub fn build_generator_training(
    gold_silver: &[LabeledExample],
    cfg: &IntentTextConfig,
) -> Result<Vec<GeneratorTrainingPair>> {
    gold_silver
        .iter()
        .map(|e| {
            e.require_labeled()?;
            let label = natural_label(&e.intents, cfg)?;
            Ok(GeneratorTrainingPair {
                input: format!("{IC_PREFIX}{}", e.utterance.trim()),
                target: label.into_string(),
                source_id: e.id.clone(),
            })
        })
        .collect()
}

pub fn train_generator<B: Seq2SeqBackend>(
    backend: &B,
    pairs: &[GeneratorTrainingPair],
    hp: &Hyperparams,
) -> Result<B::Handle> {
    if pairs.is_empty() {
        return Err(Error::Empty("generator training pairs"));
    }
    let records: Vec<PretrainRecord> = pairs.iter().map(GeneratorTrainingPair::to_record).collect();
    backend.train(None, &records, hp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeled {
    pub examples: Vec<LabeledExample>,
    pub dropped_empty: usize,
}

/// Greedy generation of one intent per utterance; results carry the bronze
/// tier and keep id and source.
pub fn pseudo_label<B: Seq2SeqBackend>(
    backend: &B,
    handle: &B::Handle,
    utterances: &[LabeledExample],
) -> Result<PseudoLabeled> {
    let inputs: Vec<String> = utterances.iter().map(|e| ic_input(&e.utterance)).collect();
    let generated = backend.generate(handle, &inputs)?;
    if generated.len() != inputs.len() {
        return Err(Error::backend(
            0,
            format!(
                "expected {} generations, got {}",
                inputs.len(),
                generated.len()
            ),
        ));
    }
    let mut examples = Vec::with_capacity(utterances.len());
    let mut dropped_empty = 0;
    for (e, g) in utterances.iter().zip(generated) {
        let intent = g.split_whitespace().collect::<Vec<_>>().join(" ");
        if intent.is_empty() {
            dropped_empty += 1;
            continue;
        }
        examples.push(LabeledExample {
            id: e.id.clone(),
            utterance: e.utterance.clone(),
            intents: vec![intent],
            slots: None,
            quality: Quality::Bronze,
            source: e.source.clone(),
        });
    }
    Ok(PseudoLabeled {
        examples,
        dropped_empty,
    })
}

/// Fraction of generated examples whose intent, compared with
/// [`normalize_label`], is absent from the training intents.
pub fn novel_intent_rate(
    generated: &[LabeledExample],
    training_intents: &[NaturalLabel],
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Empty("generated examples"));
    }
    let known: HashSet<String> = training_intents
        .iter()
        .map(|l| normalize_label(l.as_str()))
        .collect();
    let novel = generated
        .iter()
        .filter(|e| !known.contains(&normalize_label(&e.intents.join(" # "))))
        .count();
    Ok(novel as f64 / generated.len() as f64)
}
