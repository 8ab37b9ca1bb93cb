use std::collections::HashMap;

use super::RefModelError;
use crate::TokenId;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Splits text into tokens: maximal runs of `[A-Za-z0-9_]`, every other
/// character (including `'\n'`) on its own.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            run_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = run_start.take() {
            out.push(&text[s..i]);
        }
        out.push(&text[i..i + ch.len_utf8()]);
    }
    if let Some(s) = run_start {
        out.push(&text[s..]);
    }
    out
}

/// Bijection between token strings and ids `0..len`. Ids 0, 1, 2 are the
/// start, end and unknown markers; the rest are sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut body: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| t != BOS_TOKEN && t != EOS_TOKEN && t != UNK_TOKEN)
            .collect();
        body.sort_unstable();
        body.dedup();
        let mut all = vec![BOS_TOKEN.to_owned(), EOS_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        all.extend(body);
        Self::from_ordered(all).expect("specials are unique")
    }

    /// Rebuilds a vocabulary from a stored id-ordered token list.
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self, RefModelError> {
        if tokens.len() < 3 || tokens[0] != BOS_TOKEN || tokens[1] != EOS_TOKEN || tokens[2] != UNK_TOKEN {
            return Err(RefModelError::Format("vocabulary must start with <s>, </s>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(RefModelError::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos_id(&self) -> TokenId {
        0
    }

    pub fn eos_id(&self) -> TokenId {
        1
    }

    pub fn unk_id(&self) -> TokenId {
        2
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenizes `text`; tokens absent from the vocabulary map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_tokens(text).into_iter().map(|t| self.id(t).unwrap_or(self.unk_id())).collect()
    }

    /// Like [`encode`](Self::encode) but fails on the first out-of-vocabulary token.
    pub fn try_encode(&self, text: &str) -> Result<Vec<TokenId>, RefModelError> {
        split_tokens(text)
            .into_iter()
            .map(|t| self.id(t).ok_or_else(|| RefModelError::UnknownToken(t.to_owned())))
            .collect()
    }

    /// Concatenates token strings. Start/end markers render as nothing and
    /// `<unk>` as U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, RefModelError> {
        let mut out = String::new();
        for &id in ids {
            match id {
                0 | 1 => {}
                2 => out.push(char::REPLACEMENT_CHARACTER),
                _ => out.push_str(self.token(id).ok_or(RefModelError::UnknownId(id))?),
            }
        }
        Ok(out)
    }
}
