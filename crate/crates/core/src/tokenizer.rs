//! Closed-vocabulary word-level tokenizer.
//!
//! Text splits into runs of alphanumerics, single punctuation characters, the
//! newline, and the bracketed special tokens. Whitespace other than `\n` is
//! not kept; [`Vocab::decode`] re-inserts it with fixed spacing rules so that
//! rendered prompts survive an encode/decode round trip.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const PRED: &str = "[PRED]";
pub const EOA: &str = "[EOA]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: u32 = 0;
pub const PRED_ID: u32 = 1;
pub const EOA_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const SPECIALS: [&str; 4] = [PAD, PRED, EOA, UNK];

/// Words the prompt template and question generator always need.
const BASE_WORDS: &[&str] = &[
    "Answer", "the", "given", "question", ":", ".", "\n", "By", "using", "reference", "context", "(", "none",
    ")", "|", ";", "what", "is", "of",
];

const NO_SPACE_BEFORE: &[&str] = &[".", ",", ";", ":", "?", "!", ")", "\n"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Special tokens, the template words, then every piece found in `texts`
    /// in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeSet<String> = BASE_WORDS.iter().map(|w| w.to_string()).collect();
        for text in texts {
            for piece in split(text) {
                if !SPECIALS.contains(&piece) {
                    words.insert(piece.to_string());
                }
            }
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("freshly built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid(format!("vocabulary slot {i} must hold {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split(text).into_iter().map(|p| self.id(p).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let pieces: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        join(&pieces)
    }
}

/// Splits text into token pieces.
pub fn split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c == '\n' {
            out.push(&text[i..i + 1]);
        } else if c.is_whitespace() {
            continue;
        } else if c.is_alphanumeric() || c == '_' {
            let mut end = i + c.len_utf8();
            while let Some(&(j, n)) = iter.peek() {
                if n.is_alphanumeric() || n == '_' {
                    end = j + n.len_utf8();
                    iter.next();
                } else {
                    break;
                }
            }
            out.push(&text[i..end]);
        } else if c == '[' {
            match SPECIALS.iter().find(|s| text[i..].starts_with(**s)) {
                Some(s) => {
                    out.push(&text[i..i + s.len()]);
                    while let Some(&(j, _)) = iter.peek() {
                        if j < i + s.len() {
                            iter.next();
                        } else {
                            break;
                        }
                    }
                }
                None => out.push(&text[i..i + 1]),
            }
        } else {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    out
}

/// Inverse of [`split`] for text written in canonical spacing: words are
/// separated by one space, punctuation hugs the preceding word, nothing
/// follows a newline or `(`, and a trailing colon keeps its space.
pub fn join(pieces: &[&str]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &p in pieces {
        if let Some(q) = prev {
            let glue = q == "\n" || q == "(" || NO_SPACE_BEFORE.contains(&p);
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(p);
        prev = Some(p);
    }
    if prev == Some(":") {
        out.push(' ');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_punctuation_and_specials() {
        assert_eq!(
            split("Answer the question: kavo rival. [PRED]\nBy (none)."),
            vec!["Answer", "the", "question", ":", "kavo", "rival", ".", "[PRED]", "\n", "By", "(", "none", ")", "."]
        );
        assert_eq!(split("[x]"), vec!["[", "x", "]"]);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "Answer the given question: what is the ally of bavo. [PRED]\nBy using reference context: bavo ally kemu; bavo rival sopa | (none).\nAnswer: ";
        let vocab = Vocab::build([text]);
        assert_eq!(vocab.decode(&vocab.encode(text)), text);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["a b"]);
        assert_eq!(v.id(PRED), Some(PRED_ID));
        assert_eq!(v.id(EOA), Some(EOA_ID));
        assert_eq!(v.encode("zzz"), vec![UNK_ID]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Vocab::build(["b a c", "d"]);
        let b = Vocab::build(["d", "c a b"]);
        assert_eq!(a, b);
    }
}
