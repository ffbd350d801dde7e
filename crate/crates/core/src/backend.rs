//! Sequence-to-sequence model backend contract.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::PretrainRecord;
use crate::tokenizer::{Tokenizer, WhitespaceTokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Hyperparams {
    /// Secondary pre-training defaults.
    pub const PRETRAIN: Hyperparams = Hyperparams {
        learning_rate: 5e-4,
        batch_size: 128,
        epochs: 3,
        seed: 0,
    };

    /// Few-shot fine-tuning defaults; epochs apply to the largest split.
    pub const FINETUNE: Hyperparams = Hyperparams {
        learning_rate: 5e-4,
        batch_size: 1,
        epochs: 2,
        seed: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite()
            || self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.epochs == 0
        {
            return Err(Error::InvalidArgument(format!(
                "hyperparameters must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Partial hyperparameters; unset fields fall back to a base.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpOverride {
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl HpOverride {
    pub fn apply(&self, base: Hyperparams) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

/// A trainable text-to-text model.
///
/// `generate` decodes greedily and must be deterministic for a fixed handle;
/// `train` with identical records, hyperparameters and seed must yield a
/// handle with identical generations.
pub trait Seq2SeqBackend: Sync {
    type Handle: Send + Sync;

    /// Train from scratch, or continue from `init` when given.
    fn train(
        &self,
        init: Option<&Self::Handle>,
        records: &[PretrainRecord],
        hp: &Hyperparams,
    ) -> Result<Self::Handle>;

    fn generate(&self, handle: &Self::Handle, inputs: &[String]) -> Result<Vec<String>>;

    fn tokenizer(&self) -> &dyn Tokenizer;

    fn save(&self, handle: &Self::Handle, dir: &Path) -> Result<()>;

    fn load(&self, dir: &Path) -> Result<Self::Handle>;
}

/// Memorizing backend for tests and dry runs: exact input lookup, falling
/// back to the stored input with the highest token Jaccard overlap.
#[derive(Debug, Default)]
pub struct LookupBackend {
    train_calls: AtomicUsize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupTable {
    pub entries: BTreeMap<String, String>,
}

impl LookupBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of `train` calls so far.
    pub fn train_calls(&self) -> usize {
        self.train_calls.load(Ordering::SeqCst)
    }
}

fn jaccard(a: &HashSet<&str>, b: &HashSet<&str>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

impl Seq2SeqBackend for LookupBackend {
    type Handle = LookupTable;

    fn train(
        &self,
        init: Option<&LookupTable>,
        records: &[PretrainRecord],
        hp: &Hyperparams,
    ) -> Result<LookupTable> {
        hp.validate()?;
        self.train_calls.fetch_add(1, Ordering::SeqCst);
        let mut table = init.cloned().unwrap_or_default();
        for r in records {
            table.entries.insert(r.input.clone(), r.target.clone());
        }
        Ok(table)
    }

    fn generate(&self, handle: &LookupTable, inputs: &[String]) -> Result<Vec<String>> {
        Ok(inputs
            .iter()
            .map(|input| {
                if let Some(t) = handle.entries.get(input) {
                    return t.clone();
                }
                let q: HashSet<&str> = input.split_whitespace().collect();
                let mut best: Option<(f64, &String)> = None;
                for (k, v) in &handle.entries {
                    let s = jaccard(&q, &k.split_whitespace().collect());
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, v));
                    }
                }
                best.map(|(_, v)| v.clone()).unwrap_or_default()
            })
            .collect())
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &WhitespaceTokenizer
    }

    fn save(&self, handle: &LookupTable, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("lookup.json");
        fs::write(&p, serde_json::to_vec(handle)?).map_err(|e| Error::io(&p, e))
    }

    fn load(&self, dir: &Path) -> Result<LookupTable> {
        let p = dir.join("lookup.json");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::RecordFormat;

    fn rec(i: &str, t: &str) -> PretrainRecord {
        PretrainRecord {
            input: i.into(),
            target: t.into(),
            format: RecordFormat::Finetune,
            source_id: "x".into(),
        }
    }

    #[test]
    fn defaults() {
        let p = Hyperparams::PRETRAIN;
        assert_eq!((p.learning_rate, p.batch_size, p.epochs), (5e-4, 128, 3));
        let f = Hyperparams::FINETUNE;
        assert_eq!((f.learning_rate, f.batch_size), (5e-4, 1));
        let o = HpOverride {
            epochs: Some(1),
            ..Default::default()
        };
        assert_eq!(o.apply(p).epochs, 1);
        assert_eq!(o.apply(p).batch_size, 128);
    }

    #[test]
    fn lookup_backend_memorizes_and_generalizes() {
        let b = LookupBackend::new();
        let h = b
            .train(
                None,
                &[
                    rec("book a flight", "Book flight"),
                    rec("play a song", "Play music"),
                ],
                &Hyperparams::PRETRAIN,
            )
            .unwrap();
        let out = b
            .generate(&h, &["book a flight".into(), "play some song".into()])
            .unwrap();
        assert_eq!(out, vec!["Book flight", "Play music"]);
        let h2 = b
            .train(Some(&h), &[rec("x", "y")], &Hyperparams::FINETUNE)
            .unwrap();
        assert_eq!(h2.entries.len(), 3);
        assert_eq!(b.train_calls(), 2);

        let dir = tempfile::tempdir().unwrap();
        b.save(&h2, dir.path()).unwrap();
        assert_eq!(b.load(dir.path()).unwrap(), h2);
    }
}
