//! Declarative pipeline configuration (TOML).
//!
//! ```toml
//! [paths]
//! out_dir = "runs/snips"
//! train = "data/snips_train.jsonl"
//! test = "data/snips_test.jsonl"
//!
//! [splits]
//! ks = [1, 2, 4, 8, 16, 32]
//! seeds = [1, 2, 3, 4, 5]
//! ```
//!
//! Unknown keys are rejected so that typos surface as errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::HpOverride;
use crate::classifier::ClassifierParams;
use crate::dialogue_filter::{FilterLabels, ThresholdPolicy, DEFAULT_AUDIT_SIZE};
use crate::error::{Error, Result};
use crate::formats::{RecordFormat, DEFAULT_NOISE_RATE};
use crate::intent_text::IntentTextConfig;
use crate::runner::{EpochSchedule, FinetuneFormat};
use crate::splits::{validate_ks, DEFAULT_KS};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub intent_text: IntentTextConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub format: FormatConfig,
    #[serde(default)]
    pub splits: SplitsConfig,
    #[serde(default)]
    pub pretrain: HpOverride,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Use a single thread everywhere.
    #[serde(default)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pretrain_corpus: Option<PathBuf>,
    #[serde(default)]
    pub eval_sets: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub generic_intents: BTreeSet<String>,
    #[serde(default)]
    pub ood_intents: BTreeSet<String>,
    #[serde(default = "default_policy")]
    pub policy: ThresholdPolicy,
    #[serde(default = "default_audit_size")]
    pub audit_size: usize,
    #[serde(default)]
    pub classifier: ClassifierParams,
}

impl FilterConfig {
    pub fn labels(&self) -> FilterLabels {
        FilterLabels {
            generic_intents: self.generic_intents.clone(),
            ood_intents: self.ood_intents.clone(),
        }
    }
}

fn default_policy() -> ThresholdPolicy {
    ThresholdPolicy::MedianOfPositives
}

fn default_audit_size() -> usize {
    DEFAULT_AUDIT_SIZE
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            generic_intents: BTreeSet::new(),
            ood_intents: BTreeSet::new(),
            policy: default_policy(),
            audit_size: DEFAULT_AUDIT_SIZE,
            classifier: ClassifierParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatConfig {
    #[serde(default = "default_kind")]
    pub kind: RecordFormat,
    #[serde(default = "default_noise")]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> RecordFormat {
    RecordFormat::LabelDenoise
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_RATE
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig {
            kind: default_kind(),
            noise_rate: DEFAULT_NOISE_RATE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsConfig {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl Default for SplitsConfig {
    fn default() -> Self {
        SplitsConfig {
            ks: default_ks(),
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default)]
    pub format: FinetuneFormat,
    #[serde(default)]
    pub schedule: EpochSchedule,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "default_backend")]
    pub kind: String,
    /// Backend-specific settings, passed through untouched.
    #[serde(default)]
    pub options: BTreeMap<String, toml::Value>,
}

fn default_backend() -> String {
    "tiny".into()
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: default_backend(),
            options: BTreeMap::new(),
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = message
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            config_error(&key, message)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Range checks plus existence of every input path that is set.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.format.noise_rate) {
            return Err(config_error(
                "format.noise_rate",
                format!("{} is outside [0, 1)", self.format.noise_rate),
            ));
        }
        validate_ks(&self.splits.ks).map_err(|e| config_error("splits.ks", e.to_string()))?;
        if self.splits.seeds.is_empty() {
            return Err(config_error("splits.seeds", "must be non-empty"));
        }
        self.filter
            .policy
            .validate()
            .map_err(|e| config_error("filter.policy", e.to_string()))?;
        self.finetune
            .schedule
            .validate()
            .map_err(|e| config_error("finetune.schedule", e.to_string()))?;
        let p = &self.paths;
        let inputs = [
            ("paths.train", &p.train),
            ("paths.test", &p.test),
            ("paths.pretrain_corpus", &p.pretrain_corpus),
        ];
        for (key, path) in inputs {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(config_error(
                        key,
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
        }
        for path in &p.eval_sets {
            if !path.exists() {
                return Err(config_error(
                    "paths.eval_sets",
                    format!("{} does not exist", path.display()),
                ));
            }
        }
        Ok(())
    }
}
