//! Canonical data model, ingestion of raw dumps, persistence, and
//! deduplication against evaluation data.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::checksum;

/// Where an example's labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    /// Human-labeled.
    Gold,
    /// Heuristically labeled.
    Silver,
    /// Pseudo-labeled by a model.
    Bronze,
    Unlabeled,
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(Quality::Gold),
            "silver" => Ok(Quality::Silver),
            "bronze" => Ok(Quality::Bronze),
            "unlabeled" => Ok(Quality::Unlabeled),
            other => Err(Error::InvalidArgument(format!("unknown quality `{other}`"))),
        }
    }
}

/// A labeled span of an utterance. Offsets are in characters, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub id: String,
    pub utterance: String,
    /// Raw intent identifiers; more than one for multi-intent utterances.
    pub intents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<Vec<SlotSpan>>,
    pub quality: Quality,
    pub source: String,
}

impl LabeledExample {
    pub fn labeled(
        id: impl Into<String>,
        utterance: impl Into<String>,
        intents: Vec<String>,
        quality: Quality,
        source: impl Into<String>,
    ) -> Self {
        LabeledExample {
            id: id.into(),
            utterance: utterance.into(),
            intents,
            slots: None,
            quality,
            source: source.into(),
        }
    }

    pub fn unlabeled(
        id: impl Into<String>,
        utterance: impl Into<String>,
        source: impl Into<String>,
    ) -> Self {
        LabeledExample {
            id: id.into(),
            utterance: utterance.into(),
            intents: Vec::new(),
            slots: None,
            quality: Quality::Unlabeled,
            source: source.into(),
        }
    }

    pub fn with_slots(mut self, slots: Vec<SlotSpan>) -> Self {
        self.slots = Some(slots);
        self
    }

    pub fn is_labeled(&self) -> bool {
        !self.intents.is_empty()
    }

    /// Fails with [`Error::Unlabeled`] when the example carries no intent.
    pub fn require_labeled(&self) -> Result<()> {
        if self.is_labeled() {
            Ok(())
        } else {
            Err(Error::Unlabeled {
                id: self.id.clone(),
            })
        }
    }

    /// Class identity used by split construction: the raw intents joined
    /// with `#`, so multi-intent combinations form their own class.
    pub fn class_key(&self) -> String {
        self.intents.join("#")
    }

    /// Slot spans sorted by start offset.
    pub fn sorted_slots(&self) -> Vec<&SlotSpan> {
        let mut spans: Vec<&SlotSpan> = self.slots.iter().flatten().collect();
        spans.sort_by_key(|s| (s.start, s.end));
        spans
    }

    /// Text covered by a slot span.
    pub fn span_text(&self, span: &SlotSpan) -> String {
        self.utterance
            .chars()
            .skip(span.start)
            .take(span.end.saturating_sub(span.start))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| Error::InvalidExample {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.utterance.trim().is_empty() {
            return Err(invalid("utterance is empty"));
        }
        if (self.quality == Quality::Unlabeled) != self.intents.is_empty() {
            return Err(invalid(
                "quality must be `unlabeled` exactly when intents are empty",
            ));
        }
        if self.intents.iter().any(|i| i.trim().is_empty()) {
            return Err(invalid("intent identifiers must be non-empty"));
        }
        let len = self.utterance.chars().count();
        let spans = self.sorted_slots();
        for s in &spans {
            if s.start >= s.end || s.end > len {
                return Err(invalid(&format!(
                    "slot `{}` [{}, {}) outside utterance of length {len}",
                    s.label, s.start, s.end
                )));
            }
        }
        if spans.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(invalid("slot spans overlap"));
        }
        Ok(())
    }
}

/// Lowercase and collapse whitespace runs.
pub fn normalize_utterance(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sidecar describing a written corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub path: PathBuf,
    pub count: usize,
    pub quality_histogram: BTreeMap<Quality, usize>,
    pub checksum: String,
}

impl CorpusManifest {
    /// `<dir>/<stem>.manifest.json` next to the corpus file.
    pub fn sidecar_path(corpus: &Path) -> PathBuf {
        let stem = corpus
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        corpus.with_file_name(format!("{stem}.manifest.json"))
    }

    pub fn load(corpus: &Path) -> Result<Self> {
        let path = Self::sidecar_path(corpus);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Maps corpus schema fields onto keys of the source records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub utterance: String,
    #[serde(default)]
    pub intent: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
}

impl FieldMap {
    pub fn new(utterance: impl Into<String>) -> Self {
        FieldMap {
            utterance: utterance.into(),
            intent: None,
            id: None,
        }
    }

    pub fn intent(mut self, key: impl Into<String>) -> Self {
        self.intent = Some(key.into());
        self
    }

    pub fn id(mut self, key: impl Into<String>) -> Self {
        self.id = Some(key.into());
        self
    }

    /// Build from a `schema-field -> source-key` map; `utterance` is required.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let utterance = map
            .get("utterance")
            .ok_or_else(|| Error::InvalidArgument("field map must map `utterance`".into()))?;
        for key in map.keys() {
            if !matches!(key.as_str(), "utterance" | "intent" | "id") {
                return Err(Error::InvalidArgument(format!(
                    "unknown schema field `{key}` in field map"
                )));
            }
        }
        Ok(FieldMap {
            utterance: utterance.clone(),
            intent: map.get("intent").cloned(),
            id: map.get("id").cloned(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub source: String,
    /// Tier assigned to records that carry an intent.
    pub labeled_quality: Quality,
    pub exec: Exec,
}

impl IngestOptions {
    pub fn new(source: impl Into<String>) -> Self {
        IngestOptions {
            source: source.into(),
            labeled_quality: Quality::Gold,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub examples: Vec<LabeledExample>,
    /// Records without a usable utterance.
    pub missing_utterance: usize,
    /// Lines that are not JSON objects.
    pub malformed: usize,
    pub lines: usize,
}

enum ParsedLine {
    Record {
        id: Option<String>,
        utterance: String,
        intents: Vec<String>,
    },
    MissingUtterance,
    Malformed,
}

fn parse_line(line: &str, map: &FieldMap) -> ParsedLine {
    let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(line) else {
        return ParsedLine::Malformed;
    };
    let utterance = match obj.get(&map.utterance) {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return ParsedLine::MissingUtterance,
    };
    let intents = match map.intent.as_ref().and_then(|k| obj.get(k)) {
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.trim().to_string()],
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        _ => Vec::new(),
    };
    let id = map.id.as_ref().and_then(|k| match obj.get(k) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    });
    ParsedLine::Record {
        id,
        utterance,
        intents,
    }
}

/// Largest number of malformed lines tolerated in a file of `lines` lines:
/// 10%, but a single bad line is always tolerated.
pub fn malformed_tolerance(lines: usize) -> usize {
    (lines / 10).max(1)
}

/// Ingest a JSONL dump whose records use arbitrary keys.
pub fn ingest_generic_jsonl(path: &Path, map: &FieldMap, opts: &IngestOptions) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let parsed = opts.exec.map(&lines, |l| parse_line(l, map));

    let malformed = parsed
        .iter()
        .filter(|p| matches!(p, ParsedLine::Malformed))
        .count();
    if malformed > malformed_tolerance(lines.len()) {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed,
            total: lines.len(),
        });
    }

    let mut examples = Vec::with_capacity(parsed.len());
    let mut missing_utterance = 0;
    for p in parsed {
        match p {
            ParsedLine::Record {
                id,
                utterance,
                intents,
            } => {
                let id = id.unwrap_or_else(|| format!("{}-{:08}", opts.source, examples.len()));
                let quality = if intents.is_empty() {
                    Quality::Unlabeled
                } else {
                    opts.labeled_quality
                };
                examples.push(LabeledExample {
                    id,
                    utterance,
                    intents,
                    slots: None,
                    quality,
                    source: opts.source.clone(),
                });
            }
            ParsedLine::MissingUtterance => missing_utterance += 1,
            ParsedLine::Malformed => {}
        }
    }
    if missing_utterance + malformed > 0 {
        log::warn!(
            "{}: skipped {missing_utterance} records without utterance and {malformed} malformed lines",
            path.display()
        );
    }
    Ok(Ingested {
        examples,
        missing_utterance,
        malformed,
        lines: lines.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deduped {
    pub kept: Vec<LabeledExample>,
    pub removed: usize,
}

/// Drop corpus examples whose normalized utterance occurs in any eval set.
/// Duplicates inside the corpus itself are kept.
pub fn dedupe_against_eval(
    corpus: Vec<LabeledExample>,
    eval_sets: &[&[LabeledExample]],
) -> Deduped {
    let banned: HashSet<String> = eval_sets
        .iter()
        .flat_map(|set| set.iter())
        .map(|e| normalize_utterance(&e.utterance))
        .collect();
    let before = corpus.len();
    let kept: Vec<LabeledExample> = corpus
        .into_iter()
        .filter(|e| !banned.contains(&normalize_utterance(&e.utterance)))
        .collect();
    Deduped {
        removed: before - kept.len(),
        kept,
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Write any serializable records as JSONL.
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<Vec<u8>> {
    let bytes = to_jsonl(items)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Read JSONL records; schema violations name the 1-based line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Persist a corpus as JSONL plus its manifest sidecar.
pub fn write_corpus(examples: &[LabeledExample], path: &Path) -> Result<CorpusManifest> {
    let bytes = write_jsonl(examples, path)?;
    let mut quality_histogram = BTreeMap::new();
    for e in examples {
        *quality_histogram.entry(e.quality).or_insert(0) += 1;
    }
    let manifest = CorpusManifest {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        path: path.to_path_buf(),
        count: examples.len(),
        quality_histogram,
        checksum: checksum(&bytes),
    };
    let side = CorpusManifest::sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&side, e))?;
    Ok(manifest)
}

/// Read and validate a corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema_err = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: LabeledExample =
            serde_json::from_str(line).map_err(|e| schema_err(e.to_string()))?;
        ex.validate().map_err(|e| schema_err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}
