//! Tokenizer contract used by the span-noising formats and model backends.

/// Render the `k`-th sentinel placeholder. Backend adapters map these onto
/// their own reserved vocabulary.
pub fn sentinel(k: usize) -> String {
    format!("⟨mask_{k}⟩")
}

/// Index of a sentinel placeholder token, if `token` is one.
pub fn sentinel_index(token: &str) -> Option<usize> {
    token
        .strip_prefix("⟨mask_")?
        .strip_suffix('⟩')?
        .parse()
        .ok()
}

pub fn contains_sentinel(text: &str) -> bool {
    text.contains("⟨mask_")
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Inverse of [`Tokenizer::tokenize`] up to whitespace normalization.
    fn detokenize(&self, tokens: &[String]) -> String;

    fn sentinel(&self, k: usize) -> String {
        sentinel(k)
    }
}

/// Splits on whitespace; detokenizes by joining with single spaces.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(String::from).collect()
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}
