//! Raw intent identifiers to natural-language labels.
//!
//! `BookFlight` becomes `Book flight`; `atis_flight` becomes `Flight` when
//! `atis_` is a configured prefix. Multi-intent labels are joined with ` # `.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MULTI_INTENT_SEPARATOR: &str = " # ";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentTextConfig {
    /// Dataset prefixes removed before naturalizing, e.g. `atis_`.
    #[serde(default)]
    pub strip_prefixes: Vec<String>,
}

impl IntentTextConfig {
    pub fn with_prefixes<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        IntentTextConfig {
            strip_prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }
}

/// A natural-language label such as `Book flight`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NaturalLabel(String);

impl NaturalLabel {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Components of a joined multi-intent label.
    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.0.split(MULTI_INTENT_SEPARATOR)
    }
}

impl fmt::Display for NaturalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for NaturalLabel {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn is_acronym(word: &str) -> bool {
    let mut letters = word.chars().filter(|c| c.is_alphabetic()).peekable();
    letters.peek().is_some()
        && word.chars().filter(|c| c.is_alphabetic()).count() >= 2
        && letters.all(char::is_uppercase)
}

/// Split one chunk at CamelCase boundaries. A boundary falls before an
/// uppercase letter that follows a lowercase letter or digit, and before the
/// last letter of an uppercase run when a lowercase letter follows it
/// (`NYCTrip` -> `NYC`, `Trip`).
fn split_camel(chunk: &str) -> Vec<String> {
    let chars: Vec<char> = chunk.chars().collect();
    let mut words = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if i > 0 && c.is_uppercase() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower) {
                words.push(std::mem::take(&mut cur));
            }
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn lowercase_first_word(s: &str) -> String {
    let first = s.split(' ').next().unwrap_or("");
    if is_acronym(first) {
        return s.to_string();
    }
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn naturalize_single(raw: &str, cfg: &IntentTextConfig) -> Result<NaturalLabel> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(Error::InvalidArgument("empty intent identifier".into()));
    }
    let stripped = cfg
        .strip_prefixes
        .iter()
        .find_map(|p| raw.strip_prefix(p.as_str()))
        .filter(|rest| !rest.trim_matches(['_', '-', ' ']).is_empty())
        .unwrap_or(raw);

    let words: Vec<String> = stripped
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter(|c| !c.is_empty())
        .flat_map(split_camel)
        .map(|w| if is_acronym(&w) { w } else { w.to_lowercase() })
        .collect();
    if words.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "intent `{raw}` has no words"
        )));
    }
    Ok(NaturalLabel(capitalize_first(&words.join(" "))))
}

/// Convert a raw intent identifier into its natural-language label.
/// Identifiers that already contain `#` are treated as joined multi-intent
/// labels. Idempotent.
pub fn naturalize_intent(raw: &str, cfg: &IntentTextConfig) -> Result<NaturalLabel> {
    if raw.contains('#') {
        let parts = raw
            .split('#')
            .map(|p| naturalize_single(p, cfg))
            .collect::<Result<Vec<_>>>()?;
        return join_multi_intent(&parts);
    }
    naturalize_single(raw, cfg)
}

/// Join labels with ` # `; components after the first start lowercase.
pub fn join_multi_intent(labels: &[NaturalLabel]) -> Result<NaturalLabel> {
    match labels {
        [] => Err(Error::Empty("multi-intent label list")),
        [one] => Ok(one.clone()),
        [first, rest @ ..] => {
            let mut out = first.0.clone();
            for l in rest {
                out.push_str(MULTI_INTENT_SEPARATOR);
                out.push_str(&lowercase_first_word(&l.0));
            }
            Ok(NaturalLabel(out))
        }
    }
}

/// Naturalize every intent of an example and join them.
pub fn natural_label(intents: &[String], cfg: &IntentTextConfig) -> Result<NaturalLabel> {
    let parts = intents
        .iter()
        .map(|i| naturalize_intent(i, cfg))
        .collect::<Result<Vec<_>>>()?;
    join_multi_intent(&parts)
}

/// Comparison key for labels: lowercase, whitespace collapsed, and ` # `
/// spacing normalized, so `a#b` and `A  # b` compare equal.
pub fn normalize_label(text: &str) -> String {
    text.split('#')
        .map(|part| {
            part.split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase()
        })
        .collect::<Vec<_>>()
        .join(MULTI_INTENT_SEPARATOR)
}
