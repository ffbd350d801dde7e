//! Case-folding word tokenizer.
//!
//! Words are lowercased and their casing moved into marker tokens, so that
//! `Book` and `book` share one vocabulary entry. Punctuation is split off;
//! a piece written without a preceding space carries the `##` glue prefix.
//!
//! ```text
//! "Book NYC flights, please." -> ⟨cap⟩ book ⟨upper⟩ nyc flights ##, please ##.
//! ```

use lsap_core::tokenizer::{sentinel_index, Tokenizer};

pub const CAP: &str = "⟨cap⟩";
pub const UPPER: &str = "⟨upper⟩";
const GLUE: &str = "##";

fn is_special(token: &str) -> bool {
    token == CAP || token == UPPER || sentinel_index(token).is_some()
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Alphanumeric runs stay together; every other character is its own piece.
fn pieces(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in word.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else {
            if let Some(s) = start.take() {
                out.push(&word[s..i]);
            }
            out.push(&word[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&word[s..]);
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CasedWordTokenizer;

impl CasedWordTokenizer {
    fn push_piece(out: &mut Vec<String>, piece: &str, glued: bool) {
        let lower = piece.to_lowercase();
        let body = if lower == piece {
            lower
        } else if piece.chars().count() >= 2 && piece.to_uppercase() == piece {
            out.push(UPPER.into());
            lower
        } else if capitalize(&lower) == piece {
            out.push(CAP.into());
            lower
        } else {
            piece.to_string()
        };
        out.push(if glued { format!("{GLUE}{body}") } else { body });
    }
}

impl Tokenizer for CasedWordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if is_special(word) {
                out.push(word.to_string());
                continue;
            }
            for (i, piece) in pieces(word).into_iter().enumerate() {
                Self::push_piece(&mut out, piece, i > 0);
            }
        }
        out
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        let mut out = String::new();
        let mut marker: Option<&str> = None;
        let emit = |out: &mut String, text: &str, glued: bool| {
            if !(glued || out.is_empty()) {
                out.push(' ');
            }
            out.push_str(text);
        };
        for t in tokens {
            if t == CAP || t == UPPER {
                if let Some(m) = marker.replace(t) {
                    emit(&mut out, m, false);
                }
                continue;
            }
            let (glued, body) = match t.strip_prefix(GLUE) {
                Some(rest) if !rest.is_empty() => (true, rest),
                _ => (false, t.as_str()),
            };
            let text = match marker.take() {
                Some(m) if sentinel_index(body).is_some() => {
                    emit(&mut out, m, false);
                    body.to_string()
                }
                Some(CAP) => capitalize(body),
                Some(_) => body.to_uppercase(),
                None => body.to_string(),
            };
            emit(&mut out, &text, glued);
        }
        if let Some(m) = marker {
            emit(&mut out, m, false);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        CasedWordTokenizer.tokenize(s)
    }

    #[test]
    fn casing_and_glue() {
        assert_eq!(
            toks("Book NYC flights, please."),
            vec![CAP, "book", UPPER, "nyc", "flights", "##,", "please", "##."]
        );
        assert_eq!(toks("don't"), vec!["don", "##'", "##t"]);
        assert_eq!(toks("iPhone I"), vec!["iPhone", CAP, "i"]);
        assert_eq!(toks("a # b ⟨mask_0⟩"), vec!["a", "#", "b", "⟨mask_0⟩"]);
    }

    #[test]
    fn detokenize_inverts() {
        for s in [
            "Book NYC flights, please.",
            "Flight # airfare",
            "what's up?! ok",
            "utt. ⟨mask_0⟩",
            "⟨mask_0⟩ Book flight",
        ] {
            assert_eq!(CasedWordTokenizer.detokenize(&toks(s)), s);
        }
    }

    #[test]
    fn stray_markers_survive() {
        let t: Vec<String> = [CAP, "⟨mask_1⟩", "x", UPPER]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            CasedWordTokenizer.detokenize(&t),
            "⟨cap⟩ ⟨mask_1⟩ x ⟨upper⟩"
        );
    }

    proptest! {
        #[test]
        fn roundtrip(words in prop::collection::vec("[A-Za-z0-9.,!?'#-]{1,8}", 0..12)) {
            let text = words.join(" ");
            prop_assert_eq!(CasedWordTokenizer.detokenize(&toks(&text)), text);
        }
    }
}
