use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tokens::{self, BOS, EOS, N_RESERVED, RESERVED};

/// Closed vocabulary: reserved ids, one start token per language, then the
/// per-language word blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn word_surface(lang: usize, form: usize) -> String {
    format!("l{lang}_w{form}")
}

pub fn filler_surface(lang: usize, j: usize) -> String {
    format!("l{lang}_f{j}")
}

impl Vocab {
    pub fn new(n_languages: usize, n_concepts: usize, n_fillers: usize) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..n_languages).map(tokens::lang_start_surface));
        for l in 0..n_languages {
            tokens.extend((0..n_concepts).map(|c| word_surface(l, c)));
            tokens.extend((0..n_fillers).map(|j| filler_surface(l, j)));
        }
        Self::from_tokens(tokens).expect("generated tokens are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Format(format!("vocabulary id {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("vocabulary entry {i} is not a single token")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
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

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("id {id}")))
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn surfaces(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Number of languages with a start token in this vocabulary.
    pub fn n_languages(&self) -> usize {
        (0..)
            .take_while(|&l| self.index.get(&tokens::lang_start_surface(l)) == Some(&tokens::lang_start(l)))
            .count()
    }

    /// `[BOS, words…, EOS]` truncated to `max_len`, keeping EOS last.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<Vec<usize>> {
        Ok(frame(&self.ids(words)?, max_len))
    }
}

/// Adds BOS/EOS around word ids, truncating to `max_len` (at least 2).
pub fn frame(words: &[usize], max_len: usize) -> Vec<usize> {
    let keep = words.len().min(max_len.max(2) - 2);
    let mut out = Vec::with_capacity(keep + 2);
    out.push(BOS);
    out.extend_from_slice(&words[..keep]);
    out.push(EOS);
    out
}

/// Strips BOS/EOS/PAD, keeping the word ids.
pub fn unframe(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| i >= N_RESERVED).collect()
}
